// Temporary probe: diagnose joint-chain sticking on edge2d-1.
use nalgebra::DMatrix;
use sage_core::data::{build_grid, PriorConfig};
use sage_core::inference::McmcSettings;
use sage_core::posterior::summarize;
use sage_core::sage::{max_likelihood_sample, run_chains, ModelKind, SageProblem, SegmentationParams};
use sage_core::synth::{self};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16_000);
    let chains: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);
    let case = synth::generate_case("edge2d-1", 81 + k).unwrap();
    let kind = ModelKind::SageNd;
    let structure = case.structure.clone();
    let property = case.property.clone();
    let mats: Vec<&DMatrix<f64>> = structure
        .iter()
        .map(|d| &d.points)
        .chain(property.iter().map(|d| &d.points))
        .collect();
    let grid = build_grid(&case.domain, &case.truth.meta.resolution, &mats, None).unwrap();
    let prior = PriorConfig::default_for(&case.domain, &property, case.truth.meta.regions).unwrap();
    let problem =
        SageProblem::new(kind, case.domain.clone(), grid.clone(), structure, property, prior)
            .unwrap();
    let settings = McmcSettings {
        iterations: iters,
        burn_in: iters / 2,
        thinning: 8,
        chains,
        seed: 500 + k,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let set = run_chains(&problem, &settings).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let summary = summarize(&set, &grid).unwrap();
    let gt = case.truth.grid.len();
    let acc = synth::accuracy(&summary.phase_estimate[..gt], &case.truth.labels, &vec![true; gt])
        .unwrap();
    println!("=== edge2d-1 k={k} iters={iters} chains={chains} ({secs:.0}s) ===");
    println!("posterior-mean accuracy {acc:.3}");
    let mls = max_likelihood_sample(&set).unwrap();
    let mls_field = &mls.field;
    let mls_labels: Vec<usize> = (0..gt)
        .map(|i| {
            let row = mls_field.row(i);
            (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
        })
        .collect();
    let acc_mls =
        synth::accuracy(&mls_labels, &case.truth.labels, &vec![true; gt]).unwrap();
    println!("mls accuracy {acc_mls:.3}  mls log_lik {:.1} (s {:.1}, p {:.1})",
        mls.params.log_lik, mls.params.log_lik_structure, mls.params.log_lik_property);
    for ch in &set.chains {
        let first = ch.samples.first().unwrap().params.log_lik;
        let last = ch.samples.last().unwrap().params.log_lik;
        let max =
            ch.samples.iter().map(|s| s.params.log_lik).fold(f64::NEG_INFINITY, f64::max);
        println!(
            "chain {}: retained {}  log_lik first/max/last {first:.1}/{max:.1}/{last:.1}",
            ch.chain_index,
            ch.samples.len()
        );
        let lp = &ch.samples.last().unwrap().params;
        if let SegmentationParams::Latent { lengthscales, std, .. } = &lp.segmentation {
            println!("  seg hypers: ls {lengthscales:?} std {std:.3}");
        }
        for (j, p) in lp.property.iter().enumerate() {
            for (r, reg) in p.regions.iter().enumerate() {
                println!(
                    "  prop{j} r{r}: ls {:?} std {:.3} bias {:.3}",
                    reg.lengthscales, reg.std, reg.bias
                );
            }
            println!("  prop{j} noise {:.4}", p.noise);
        }
        for st in &ch.stats {
            println!(
                "  block {:<22} post-rate {:.2}  step {:.4}",
                st.name,
                st.post_rate(),
                st.final_step
            );
        }
    }
    println!("rhat {:?}", set.rhat);
}
