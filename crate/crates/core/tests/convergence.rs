use advgdro::convergence::{
    analytic_bound, assemble, check_bound, estimate_gap, solve_minimax, worst_case_adv_loss, ConvexInstance,
    GapConfig, InstanceSpec,
};
use advgdro::trainers::{train, Method};

#[test]
fn missing_renormalization_breaks_the_bound() {
    let inst = ConvexInstance::synthetic(&InstanceSpec {
        noise: 0.3,
        ..InstanceSpec::default()
    })
    .unwrap();
    let oracle = solve_minimax(&inst, 1e-6).unwrap();
    assert!(oracle.converged);
    let corrupt = GapConfig {
        batch_size: 1,
        corrupt_skip_renormalize: true,
        ..GapConfig::default()
    };
    let est = estimate_gap(&inst, &corrupt, &oracle, 2_000_000, 1).unwrap();
    let report = assemble(&inst, &oracle, 1, vec![est]);
    assert_eq!(check_bound(&report), vec![false], "{:?}", report.rows);
}

#[test]
fn single_group_gap_is_adversarial_sgd_suboptimality() {
    let inst = ConvexInstance::synthetic(&InstanceSpec {
        groups: 1,
        ..InstanceSpec::default()
    })
    .unwrap();
    let oracle = solve_minimax(&inst, 1e-6).unwrap();
    let cfg = GapConfig::default();
    let est = estimate_gap(&inst, &cfg, &oracle, 500, 3).unwrap();
    for (r, gap) in est.gaps.iter().enumerate() {
        let mut tc = cfg.train_config(&inst, 500, r);
        tc.method = Method::AdvErm;
        tc.eta_q = None;
        let rec = train(&tc, &inst.dataset, None).unwrap();
        let loss = worst_case_adv_loss(&rec.average_params().unwrap(), &inst).unwrap()[0];
        assert_eq!(*gap, loss - oracle.value);
    }
}

#[test]
fn gap_vanishes_for_long_runs() {
    let inst = ConvexInstance::synthetic(&InstanceSpec::default()).unwrap();
    let oracle = solve_minimax(&inst, 1e-6).unwrap();
    let est = estimate_gap(&inst, &GapConfig::default(), &oracle, 100_000, 2).unwrap();
    assert!(est.mean < 5e-3, "{}", est.mean);
    assert!(est.gaps.iter().all(|&g| g >= -1e-5));
}

#[test]
fn oracle_converges_for_more_groups() {
    for m in [1, 3, 4] {
        let inst = ConvexInstance::synthetic(&InstanceSpec {
            groups: m,
            per_group: 60,
            ..InstanceSpec::default()
        })
        .unwrap();
        let o = solve_minimax(&inst, 1e-6).unwrap();
        assert!(o.converged, "m={m} certificate {}", o.certificate);
    }
}

#[test]
fn measured_constants_give_finite_positive_bounds() {
    let inst = ConvexInstance::synthetic(&InstanceSpec::default()).unwrap();
    let oracle = solve_minimax(&inst, 1e-6).unwrap();
    let cfg = GapConfig::default();
    let est: Vec<_> = [100, 400]
        .iter()
        .map(|&t| estimate_gap(&inst, &cfg, &oracle, t, 3).unwrap())
        .collect();
    let rep = assemble(&inst, &oracle, 3, est);
    assert!(rep.b_loss > 0.0 && rep.b_grad > 0.0);
    for r in &rep.rows {
        assert_eq!(r.bound, analytic_bound(2, 1.0, rep.b_grad, rep.b_loss, r.t));
    }
    assert!(check_bound(&rep).iter().all(|&b| b));
}
