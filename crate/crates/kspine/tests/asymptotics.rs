use kspine::forest::{simulate_population, stream, OffspringSampler};
use kspine::model::{self, OffspringModel};

fn load(name: &str) -> OffspringModel {
    let path = format!("{}/../../models/{name}.json", env!("CARGO_MANIFEST_DIR"));
    model::load_model(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn survival_frequency_times_t() {
    let m = load("geo1");
    let sp = model::spectral(&m).unwrap();
    let horizon = 200.0 / sp.zeta;
    let sampler = OffspringSampler::new(&m);
    let n = 1_000_000u64;
    let mut alive = 0u64;
    let mut total = 0u64;
    for r in 0..n {
        let z = simulate_population(&m, &sampler, horizon, 0, u64::MAX, &mut stream(21, r)).unwrap();
        let size: u64 = z.iter().sum();
        alive += (size > 0) as u64;
        total += size;
    }
    let p = alive as f64 / n as f64;
    let scaled = p * horizon;
    let limit = 2.0 * sp.xi[0] / sp.zeta;
    assert!((scaled / limit - 1.0).abs() < 0.10, "T·P(N_T > 0) = {scaled}, limit {limit}");
    // E[N_T] = 1 for a critical process; N_T has variance ζT here.
    let mean = total as f64 / n as f64;
    let se = (sp.zeta * horizon / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean} se {se}");
}

#[test]
fn yaglom_conditional_means() {
    let m = load("sym2");
    let sp = model::spectral(&m).unwrap();
    let horizon = 200.0 / sp.zeta;
    let sampler = OffspringSampler::new(&m);
    let mut sums = vec![0.0; m.d];
    let mut survivors = 0u64;
    for r in 0..200_000u64 {
        let z = simulate_population(&m, &sampler, horizon, 0, u64::MAX, &mut stream(22, r)).unwrap();
        if z.iter().any(|&x| x > 0) {
            survivors += 1;
            for (s, &x) in sums.iter_mut().zip(&z) {
                *s += x as f64 / horizon;
            }
        }
    }
    assert!(survivors > 500);
    for j in 0..m.d {
        let mean = sums[j] / survivors as f64;
        let limit = sp.zeta / 2.0 * sp.eta[j];
        assert!((mean / limit - 1.0).abs() < 0.10, "type {}: {mean} vs {limit}", j + 1);
    }
}
