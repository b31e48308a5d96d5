//! Levene fixtures frozen from an independent statistics package
//! (mean-centred variant): groups, W, p.

#![allow(clippy::excessive_precision)]

fn groups(g: &[&[f64]]) -> Vec<Vec<f64>> {
    g.iter().map(|v| v.to_vec()).collect()
}

pub fn fixtures() -> Vec<(Vec<Vec<f64>>, f64, f64)> {
    let mut unstable = vec![0.53; 10];
    unstable.extend([0.7, 0.72, 0.69, 0.71, 0.7, 0.74, 0.73, 0.68, 0.7, 0.71, 0.72, 0.7, 0.69, 0.71, 0.7]);
    let stable = vec![
        0.71, 0.72, 0.73, 0.7, 0.69, 0.71, 0.72, 0.74, 0.7, 0.7, 0.71, 0.73, 0.72, 0.7, 0.69, 0.71,
        0.72, 0.7, 0.73, 0.71, 0.7, 0.72, 0.71, 0.69, 0.7,
    ];
    vec![
        (groups(&[&[0.0, 0.0, 4.0, 4.0], &[1.0, 1.0, 3.0, 3.0]]), f64::INFINITY, 0.0),
        (groups(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]), 0.0, 1.0),
        (
            groups(&[&[1.0, 2.0, 3.5, 4.0], &[2.0, 2.1, 2.2, 2.05], &[0.5, 3.0, 6.0, 1.0]]),
            5.68073721759809747e+00,
            2.53775555642284413e-02,
        ),
        (
            groups(&[&[0.61, 0.63, 0.58, 0.66, 0.6], &[0.53, 0.71, 0.53, 0.69, 0.52, 0.7]]),
            7.63196227403717700e+01,
            1.08842697741349797e-05,
        ),
        (
            groups(&[
                &[10.0, 12.0, 11.0, 13.0, 9.0, 10.0],
                &[5.0, 20.0, 8.0, 17.0, 2.0, 25.0],
                &[11.0, 11.0, 12.0, 10.0],
            ]),
            2.16932515337423268e+01,
            7.21096253139406120e-05,
        ),
        (
            groups(&[&[1.0, 1.0, 1.0, 2.0], &[3.0, 3.0, 3.0, 9.0]]),
            6.08108108108108070e+00,
            4.87222848931915323e-02,
        ),
        (vec![unstable, stable], 2.61150285018033287e+02, 4.78445614550911067e-21),
        (
            groups(&[
                &[-3.2, 4.1, 0.0, 2.2, -1.5],
                &[0.1, -0.2, 0.15, -0.05, 0.0],
                &[7.0, 8.0, 6.0, 9.0, 7.5],
                &[1.0, 2.0, 3.0, 4.0, 5.0],
            ]),
            5.18477164544341829e+00,
            1.08019176894501162e-02,
        ),
        (
            groups(&[&[2.5, 3.5], &[1.0, 4.0], &[2.9, 3.1], &[0.0, 5.0]]),
            f64::INFINITY,
            0.0,
        ),
        (
            groups(&[
                &[100.0, 100.5, 99.5, 101.0, 98.0, 102.0, 100.2],
                &[100.0, 100.1, 99.9, 100.05, 99.95],
            ]),
            4.51249782476980332e+00,
            5.95942198866495979e-02,
        ),
        (
            groups(&[
                &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
                &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
                &[0.5, 0.5, 0.4, 0.6],
            ]),
            3.94875000000000227e+02,
            2.29540724168062638e-12,
        ),
    ]
}
