use flowdiff_core::backbone::{DenoiserBackbone, DenoiserConfig, LatentKind};
use flowdiff_core::data::{generate_synthetic_dataset, toy_case_declarations, Subset};
use flowdiff_core::evaluation::{ensemble_predict, evaluate, mse_fields, spearman_rank_correlation};
use flowdiff_core::rng::RngFactory;
use flowdiff_core::samplers::{SamplerPlan, SigmaRule};
use flowdiff_core::schedules::ScheduleParams;
use flowdiff_core::training::{train_with_dataset, OptimizerKind, TrainConfig};
use std::time::Instant;

#[test]
#[ignore]
fn learn_toy_end_to_end() {
    let size = 16;
    let ds = generate_synthetic_dataset(
        size,
        size,
        20,
        0.2,
        0.45,
        8.0e6,
        &toy_case_declarations(),
        &RngFactory::new(42),
    )
    .unwrap();
    let schedule_params = ScheduleParams {
        num_steps: 400,
        beta_start: 1e-4,
        beta_end: 0.02,
    };
    let config = TrainConfig {
        iterations: 5000,
        batch_size: 8,
        learning_rate: 2e-4,
        optimizer: OptimizerKind::Adam,
        seed: 7,
        schedule: schedule_params.clone(),
        backbone: DenoiserConfig {
            input_channels: 6,
            input_size: size,
            base_width: 16,
            depth: 2,
            attn_levels: vec![1],
            latent_kind: LatentKind::Dit,
            latent_blocks: 4,
            latent_heads: 4,
            embed_dim: 64,
            patch_size: 1,
            time_embed_dim: 64,
        },
        dataset_root: None,
        checkpoint_every: 0,
        ema_decay: None,
    };
    let schedule = schedule_params.build().unwrap();
    let det_plan = SamplerPlan::ddim_strided(400, 8, SigmaRule::DeterministicZero).unwrap();
    let sto_plan = SamplerPlan::ddim_strided(400, 8, SigmaRule::DdpmEquivalent).unwrap();
    let stats = ds.case_statistics().unwrap();
    let factory = RngFactory::new(7);

    let untrained = DenoiserBackbone::new(config.backbone.clone(), &factory).unwrap();
    let report0 = evaluate(&untrained, &ds, &stats, &det_plan, &schedule, 8, &factory).unwrap();
    let mu0: f64 =
        report0.cases.iter().map(|c| c.mse_mu).sum::<f64>() / report0.cases.len() as f64;
    println!("untrained MSE_mu {mu0}");

    let t0 = Instant::now();
    let outcome = train_with_dataset(&config, &ds, None).unwrap();
    println!("training took {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    let head: f64 = outcome.losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = outcome.losses[4900..].iter().sum::<f64>() / 100.0;
    println!("loss first100 {head} last100 {tail}");

    for (name, plan, e) in [
        ("det E=8", &det_plan, 8usize),
        ("sto E=8", &sto_plan, 8),
        ("sto E=16", &sto_plan, 16),
    ] {
        let report = evaluate(&outcome.model, &ds, &stats, plan, &schedule, e, &factory).unwrap();
        let mu: f64 =
            report.cases.iter().map(|c| c.mse_mu).sum::<f64>() / report.cases.len() as f64;
        println!("[{name}] trained MSE_mu {mu:.5} improvement {:.1}x", mu0 / mu);
        let by_case = ds.by_case();
        for (case_id, info) in ds.split.iter() {
            if info.subset != Subset::Test {
                continue;
            }
            let cond = &by_case[case_id][0].condition;
            let pred = ensemble_predict(
                &outcome.model,
                cond,
                plan,
                &schedule,
                e,
                &factory,
                (*case_id as u64) << 40,
                false,
            )
            .unwrap();
            let sigma_hat = pred.std.unwrap();
            let sigma_ref = &stats[case_id].std;
            let rc = spearman_rank_correlation(sigma_hat.data(), sigma_ref.data());
            let msig = mse_fields(&sigma_hat, sigma_ref, Some(cond.mask())).unwrap();
            // diagnostics: mean sigma-hat in support vs out of support
            let (h, w) = (size, size);
            let plane = h * w;
            let mut in_s = (0.0, 0usize);
            let mut out_s = (0.0, 0usize);
            for i in 0..h {
                for j in 0..w {
                    let idx = i * w + j;
                    if cond.mask()[idx] == 1.0 {
                        continue;
                    }
                    let sref = sigma_ref.data()[idx];
                    let sh = sigma_hat.data()[idx] + sigma_hat.data()[plane + idx] + sigma_hat.data()[2 * plane + idx];
                    if sref > 0.0 {
                        in_s = (in_s.0 + sh / 3.0, in_s.1 + 1);
                    } else {
                        out_s = (out_s.0 + sh / 3.0, out_s.1 + 1);
                    }
                }
            }
            println!(
                "[{name}] case {case_id}: rank corr {rc:.3}, mse_sigma {msig:.5}, sigma_hat in-support {:.4} ({} cells) vs out {:.4} ({} cells)",
                in_s.0 / in_s.1 as f64,
                in_s.1,
                out_s.0 / out_s.1.max(1) as f64,
                out_s.1
            );
        }
    }
}
