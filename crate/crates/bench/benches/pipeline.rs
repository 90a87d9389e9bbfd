//! Timing probes for the stages that dominate the pipeline cost.
//!
//! Three groups:
//!
//! * `assembly`: one residual + stiffness assembly pass over the full mesh,
//!   the inner kernel of every full-order Newton iteration.
//! * `fom_step`: a complete Newton solve of one macroscopic load step,
//!   the unit the reduced models are trying to beat.
//! * `online_step`: the same single load path replayed by the full-order
//!   solver, the Galerkin ROM and the hyperreduced ROM, trained once in
//!   the setup. The ratio of the `fom` and `hyper` lines is the speedup
//!   the accuracy campaigns report.
//!
//! Sample counts are deliberately small; these are solver-scale workloads,
//! not microbenchmarks.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hyperrom::bench::{build_campaign, standard_rve, train_hyper, train_rom, Campaign, CampaignSpec};
use hyperrom::fem::{assemble, newton_solve, AssembleParts};
use hyperrom::galerkin::run_galerkin_path;
use hyperrom::hyper::{run_hyper_rve, HyperMethod, HyperModel, HyperRunConfig};
use hyperrom::reduce::ReduceMethod;
use hyperrom::{FullState, NewtonOpts, Rve};

use nalgebra::Matrix3;

/// A 3% shear step, the magnitude the load-path generator uses.
fn shear_step() -> Matrix3<f64> {
    let mut f = Matrix3::identity();
    f[(0, 1)] = 0.03;
    f
}

/// Solves one shear step so assembly is timed at a deformed state.
fn deformed_state(rve: &Rve) -> FullState {
    let solve = newton_solve(rve, &shear_step(), &NewtonOpts::default())
        .expect("shear step must assemble");
    assert!(solve.status.is_converged(), "shear step must converge");
    solve.state
}

fn bench_assembly(cr: &mut Criterion) {
    let mut group = cr.benchmark_group("assembly");
    group.sample_size(30);
    for divisions in [4usize, 6] {
        let rve = standard_rve(divisions).expect("standard RVE");
        let state = deformed_state(&rve);
        group.bench_with_input(
            BenchmarkId::new("residual_stiffness", divisions),
            &(&rve, &state),
            |b, (rve, state)| b.iter(|| assemble(rve, state, AssembleParts::newton()).unwrap()),
        );
    }
    group.finish();
}

fn bench_fom_step(cr: &mut Criterion) {
    let mut group = cr.benchmark_group("fom_step");
    group.sample_size(15);
    let opts = NewtonOpts::default();
    for divisions in [4usize, 6] {
        let rve = standard_rve(divisions).expect("standard RVE");
        group.bench_with_input(
            BenchmarkId::new("newton_solve", divisions),
            &rve,
            |b, rve| b.iter(|| newton_solve(rve, &shear_step(), &opts).unwrap()),
        );
    }
    group.finish();
}

/// One trained cell on a small campaign, shared by the online benches.
struct OnlineFixture {
    campaign: Campaign,
    rom: hyperrom::bench::TrainedRom,
    hyper: HyperModel,
}

fn online_fixture() -> OnlineFixture {
    let spec = CampaignSpec {
        divisions: 4,
        n_train_paths: 4,
        n_val_paths: 4,
        n_steps: 6,
        ..CampaignSpec::default()
    };
    let campaign = build_campaign(&spec, &NewtonOpts::default()).expect("campaign");
    let rom = train_rom(&campaign, ReduceMethod::Pod, 9).expect("trained space");
    let hyper = train_hyper(&campaign, &rom, HyperMethod::Lehm, 50, 0.0).expect("hyper model");
    OnlineFixture { campaign, rom, hyper }
}

fn bench_online_step(cr: &mut Criterion) {
    let fx = online_fixture();
    let path = fx.campaign.paths[0].fbar_sequence();
    let opts = fx.campaign.opts;

    let mut group = cr.benchmark_group("online_path");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("fom", path.len()), |b| {
        b.iter(|| {
            let mut warm = FullState::reference(fx.campaign.rve.n_dofs());
            for fbar in &path {
                let solve = hyperrom::fem::newton_solve_from(
                    &fx.campaign.rve,
                    &warm.fbar,
                    &warm.u,
                    fbar,
                    &opts,
                )
                .unwrap();
                warm = solve.state;
            }
        })
    });
    group.bench_function(BenchmarkId::new("galerkin", path.len()), |b| {
        b.iter(|| {
            run_galerkin_path(
                &fx.campaign.rve,
                &fx.rom.model,
                &fx.rom.rp,
                &path,
                0,
                &opts,
                false,
            )
            .unwrap()
        })
    });
    group.bench_function(BenchmarkId::new("hyper", path.len()), |b| {
        let cfg = HyperRunConfig {
            rve: &fx.campaign.rve,
            model: &fx.rom.model,
            rp: &fx.rom.rp,
            hyper: &fx.hyper,
            opts: &opts,
            lspg_paper_sign: false,
            record_full_states: false,
            homogenize: true,
        };
        b.iter(|| run_hyper_rve(&cfg, &path).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_assembly, bench_fom_step, bench_online_step);
criterion_main!(benches);
