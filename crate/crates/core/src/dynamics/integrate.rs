/// One classical fourth-order Runge-Kutta step of `dx/dt = f(x)`.
pub fn rk4_step<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k1 = f(x);
    let x2: Vec<f64> = x.iter().zip(&k1).map(|(xi, k)| xi + 0.5 * h * k).collect();
    let k2 = f(&x2);
    let x3: Vec<f64> = x.iter().zip(&k2).map(|(xi, k)| xi + 0.5 * h * k).collect();
    let k3 = f(&x3);
    let x4: Vec<f64> = x.iter().zip(&k3).map(|(xi, k)| xi + h * k).collect();
    let k4 = f(&x4);
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrates over `duration` with equal substeps no longer than `max_step`.
pub fn rk4_integrate<F>(f: F, x: &[f64], duration: f64, max_step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let steps = ((duration / max_step) - 1e-9).ceil().max(1.0) as usize;
    let h = duration / steps as f64;
    let mut state = x.to_vec();
    for _ in 0..steps {
        state = rk4_step(&f, &state, h);
    }
    state
}
