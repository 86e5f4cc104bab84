//! Butcher tableaus for the embedded Runge-Kutta pairs.

// reference coefficients are transcribed digit for digit
#![allow(clippy::excessive_precision)]

/// Tableau identifier, as referenced by the model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tableau {
    Euler,
    Dopri5,
    Dopri8,
}

impl Tableau {
    /// Order of the higher method of the pair.
    pub fn order(&self) -> u32 {
        match self {
            Tableau::Euler => 1,
            Tableau::Dopri5 => 5,
            Tableau::Dopri8 => 8,
        }
    }

    pub fn coefficients(&self) -> ButcherPair {
        match self {
            Tableau::Euler => euler(),
            Tableau::Dopri5 => dopri5(),
            Tableau::Dopri8 => dopri8(),
        }
    }
}

/// Embedded pair: `b` weights give the propagated solution, `err` weights
/// give the difference between the pair's two solutions, so the embedded
/// lower-order solution is `z_hat1 - h * sum(err_i * k_i)`.
pub struct ButcherPair {
    pub stages: usize,
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    /// None for single methods (fixed-step use only).
    pub err: Option<Vec<f64>>,
}

fn euler() -> ButcherPair {
    ButcherPair {
        stages: 1,
        a: vec![vec![0.0]],
        c: vec![0.0],
        b: vec![1.0],
        err: None,
    }
}

/// Dormand-Prince 5(4), the classic 7-stage pair.
fn dopri5() -> ButcherPair {
    let a = vec![
        vec![],
        vec![1.0 / 5.0],
        vec![3.0 / 40.0, 9.0 / 40.0],
        vec![44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        vec![
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
        ],
        vec![
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        vec![
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    let c = vec![0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    let b = vec![
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    // 5th minus 4th order weights
    let err = vec![
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    ButcherPair {
        stages: 7,
        a,
        c,
        b,
        err: Some(err),
    }
}

/// Dormand-Prince 8th order, 12-stage core (coefficients of dop853). The
/// error weights correspond to the embedded 5th-order comparison.
fn dopri8() -> ButcherPair {
    let a = vec![
        vec![],
        vec![5.26001519587677318785587544488e-2],
        vec![
            1.97250569845378994544595329183e-2,
            5.91751709536136983633785987549e-2,
        ],
        vec![
            2.95875854768068491816892993775e-2,
            0.0,
            8.87627564304205475450678981324e-2,
        ],
        vec![
            2.41365134159266685502369798665e-1,
            0.0,
            -8.84549479328286085344864962717e-1,
            9.24834003261792003115737966543e-1,
        ],
        vec![
            3.7037037037037037037037037037e-2,
            0.0,
            0.0,
            1.70828608729473871279604482173e-1,
            1.25467687566822425016691814123e-1,
        ],
        vec![
            3.7109375e-2,
            0.0,
            0.0,
            1.70252211019544039314978060272e-1,
            6.02165389804559606850219397283e-2,
            -1.7578125e-2,
        ],
        vec![
            3.70920001185047927108779319836e-2,
            0.0,
            0.0,
            1.70383925712239993810214054705e-1,
            1.07262030446373284651809199168e-1,
            -1.53194377486244017527936158236e-2,
            8.27378916381402288758473766002e-3,
        ],
        vec![
            6.24110958716075717114429577812e-1,
            0.0,
            0.0,
            -3.36089262944694129406857109825,
            -8.68219346841726006818189891453e-1,
            2.75920996994467083049415600797e1,
            2.01540675504778934086186788979e1,
            -4.34898841810699588477366255144e1,
        ],
        vec![
            4.77662536438264365890433908527e-1,
            0.0,
            0.0,
            -2.48811461997166764192642586468,
            -5.90290826836842996371446475743e-1,
            2.12300514481811942347288949897e1,
            1.52792336328824235832596922938e1,
            -3.32882109689848629194453265587e1,
            -2.03312017085086261358222928593e-2,
        ],
        vec![
            -9.3714243008598732571704021658e-1,
            0.0,
            0.0,
            5.18637242884406370830023853209,
            1.09143734899672957818500254654,
            -8.14978701074692612513997267357,
            -1.85200656599969598641566180701e1,
            2.27394870993505042818970056734e1,
            2.49360555267965238987089396762,
            -3.0467644718982195003823669022,
        ],
        vec![
            2.27331014751653820792359768449,
            0.0,
            0.0,
            -1.05344954667372501984066689879e1,
            -2.00087205822486249909675718444,
            -1.79589318631187989172765950534e1,
            2.79488845294199600508499808837e1,
            -2.85899827713502369474065508674,
            -8.87285693353062954433549289258,
            1.23605671757943030647266201528e1,
            6.43392746015763530355970484046e-1,
        ],
    ];
    let sqrt6 = 6.0_f64.sqrt();
    let c = vec![
        0.0,
        2.0 * (6.0 - sqrt6) / 135.0,
        (6.0 - sqrt6) / 45.0,
        (6.0 - sqrt6) / 30.0,
        (6.0 + sqrt6) / 30.0,
        1.0 / 3.0,
        1.0 / 4.0,
        4.0 / 13.0,
        127.0 / 195.0,
        3.0 / 5.0,
        6.0 / 7.0,
        1.0,
    ];
    let b = vec![
        5.42937341165687622380535766363e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        4.45031289275240888144113950566,
        1.89151789931450038304281599044,
        -5.8012039600105847814672114227,
        3.1116436695781989440891606237e-1,
        -1.52160949662516078556178806805e-1,
        2.01365400804030348374776537501e-1,
        4.47106157277725905176885569043e-2,
    ];
    let err = vec![
        0.1312004499419488073250102996e-1,
        0.0,
        0.0,
        0.0,
        0.0,
        -0.1225156446376204440720569753e1,
        -0.4957589496572501915214079952,
        0.1664377182454986536961530415e1,
        -0.3503288487499736816886487290,
        0.3341791187130174790297318841,
        0.8192320648511571246570742613e-1,
        -0.2235530786388629525884427845e-1,
    ];
    ButcherPair {
        stages: 12,
        a,
        c,
        b,
        err: Some(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_consistency(pair: &ButcherPair) {
        // row sums equal the nodes, weights sum to one
        for i in 0..pair.stages {
            let row_sum: f64 = pair.a[i].iter().sum();
            assert!(
                (row_sum - pair.c[i]).abs() < 1e-12,
                "row {i}: sum {row_sum} vs c {}",
                pair.c[i]
            );
        }
        let b_sum: f64 = pair.b.iter().sum();
        assert!((b_sum - 1.0).abs() < 1e-12);
        if let Some(err) = &pair.err {
            // error weights are a difference of two consistent methods
            let e_sum: f64 = err.iter().sum();
            assert!(e_sum.abs() < 1e-12, "error weights sum to {e_sum}");
        }
    }

    #[test]
    fn tableaus_are_consistent() {
        check_consistency(&euler());
        check_consistency(&dopri5());
        check_consistency(&dopri8());
    }
}
