// Temporary diagnostic harness; run with
//   cargo test --release -p kernelscope --test debug_mpls -- --ignored --nocapture

use kernelscope::benchmarks::BenchmarkSpec;
use kernelscope::benchmarks::SystemKind;
use kernelscope::dynamics::generate_dataset;
use kernelscope::features::extract_regression_samples;
use kernelscope::mpls::{assemble_reduction, mpls, MplsConfig};

#[test]
#[ignore]
fn inspect_pl_mpls() {
    inspect(SystemKind::Pl);
}

#[test]
#[ignore]
fn inspect_od_mpls() {
    inspect(SystemKind::Od);
}

#[test]
#[ignore]
fn inspect_plwdc_mpls() {
    inspect(SystemKind::Plwdc);
}

fn inspect(kind: SystemKind) {
    let bench = BenchmarkSpec::by_kind(kind);
    let spec = bench.system_spec(2, 12345, 200);
    let m = std::env::var("DBG_M").ok().and_then(|v| v.parse().ok()).unwrap_or(50_000);
    let data = generate_dataset(&spec, m).unwrap();
    let samples = extract_regression_samples(&data).unwrap();
    println!("Q = {}", samples.len());

    for lambda in [None, Some(1.0), Some(0.1), Some(0.01)] {
        let cfg = MplsConfig { lambda, split_seed: 7, ..Default::default() };
        let out = mpls(&samples, bench.dprime, &cfg).unwrap();
        let beta_unit = &out.beta_hat / out.beta_hat.norm();
        let reduction = assemble_reduction(&samples, &out, bench.dprime).unwrap();
        let err = kernelscope::mpls::err_b(&bench.true_b, &reduction).unwrap();
        let mut cos_beta = Vec::new();
        let mut cos_a1 = Vec::new();
        for r in 0..bench.dprime {
            let b_row = bench.true_b.rows.row(r).transpose();
            cos_beta.push(format!("{:+.4}", beta_unit.dot(&b_row)));
            cos_a1.push(format!("{:+.4}", out.a_hat.row(0).transpose().dot(&b_row)));
        }
        println!(
            "lambda={lambda:?}: |beta|={:.4e} cos(beta,B*)={cos_beta:?} cos(A1,B*)={cos_a1:?} sv[0..4]={:?} pick={:?} err_B={err:.4e}",
            out.beta_hat.norm(),
            out.singular_values.iter().take(4).map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            reduction.provenance,
        );
    }
}
