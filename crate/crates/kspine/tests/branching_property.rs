use kspine::forest::{stream, GenealogyTree, DEFAULT_CAP};
use kspine::model::{self, OffspringModel};
use kspine::spine::{spine_simulate, SpineCache, SpineOptions, SpineWorkspace};
use kspine::stats::ks_two_sample;

fn load(name: &str) -> OffspringModel {
    let path = format!("{}/../../models/{name}.json", env!("CARGO_MANIFEST_DIR"));
    model::load_model(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn descends_from(tree: &GenealogyTree, mut x: u32, v: u32) -> bool {
    loop {
        if x == v {
            return true;
        }
        if x == 0 {
            return false;
        }
        x = tree.get(x).parent;
    }
}

/// Below the individual that carries both marks at t0, the tree under
/// Q^{(2),θ}_{T,r} must look like a fresh Q^{(2),θ}_{T−t0,c} tree, where c is
/// the type of that individual.
#[test]
fn subtree_below_tagged_vertex_is_a_fresh_spine_tree() {
    let m = load("asym2");
    let theta = [0.5, 0.5];
    let (k, horizon, t0) = (2, 6.0, 2.5);
    let opts = |root| SpineOptions { root_type: root, grow_unmarked: true, cap: DEFAULT_CAP };
    let mut ws = SpineWorkspace::default();

    let full = SpineCache::new(&m, k, &theta, horizon).unwrap();
    let mut tree = GenealogyTree::new(m.d, 0, horizon);
    let mut split = vec![Vec::new(); m.d];
    let mut sizes = vec![Vec::new(); m.d];
    for r in 0..100_000u64 {
        let rec = spine_simulate(&full, &opts(0), &mut tree, &mut ws, &mut stream(31, r)).unwrap();
        if rec.events[0].time <= t0 {
            continue;
        }
        let mut v = rec.sample[0];
        while !tree.get(v).is_alive_at(t0) {
            v = tree.get(v).parent;
        }
        let c = tree.get(v).ty as usize;
        split[c].push(rec.events[0].time - t0);
        let n = (0..tree.len() as u32)
            .filter(|&x| tree.get(x).death.is_infinite() && descends_from(&tree, x, v))
            .count();
        sizes[c].push(n as f64);
    }

    let rest = horizon - t0;
    for c in 0..m.d {
        assert!(split[c].len() > 1000, "type {} tagged {} times", c + 1, split[c].len());
        let fresh = SpineCache::new(&m, k, &theta, rest).unwrap();
        let mut t = GenealogyTree::new(m.d, c, rest);
        let mut fresh_split = Vec::new();
        let mut fresh_sizes = Vec::new();
        for r in 0..60_000u64 {
            let rec = spine_simulate(&fresh, &opts(c), &mut t, &mut ws, &mut stream(32 + c as u64, r)).unwrap();
            fresh_split.push(rec.events[0].time);
            fresh_sizes.push(rec.n_total().unwrap() as f64);
        }
        let (_, p1) = ks_two_sample(&split[c], &fresh_split);
        let (_, p2) = ks_two_sample(&sizes[c], &fresh_sizes);
        assert!(p1 > 0.01 && p2 > 0.01, "type {}: split p = {p1}, size p = {p2}", c + 1);
    }
}
