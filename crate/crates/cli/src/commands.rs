use std::path::{Path, PathBuf};

use moe_core::datagen::{
    gen_moe_sample, gen_switch_signal, gen_three_class, CovariateSampler, SignalSpec,
};
use moe_core::inference::{mean_ci, sandwich_covariance};
use moe_core::selection::{choose_g, fit_grid, selection_rows, SelectionRow};
use moe_core::tasks::{
    classify_map, cluster_gate, cluster_posterior, predict_mean, predict_variance,
};
use moe_core::{multi_start_fit, Dataset, ExpertDesign, Family, FitConfig, FitResult};
use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CliError, CliResult};
use crate::model_file::{parse_family, ModelFile};
use crate::table::{fmt_f64, write_csv, write_dataset, Table};
use crate::{
    DataArgs, EstimationArgs, FamilyArg, FitArgs, Mode, PredictArgs, Preset, Sampler, SelectArgs,
    Simulate, SummarizeArgs,
};

const RNG_NAME: &str = "ChaCha8Rng (seed_from_u64)";

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_sidecar(out: &Path, value: serde_json::Value) -> CliResult<()> {
    let path = sidecar_path(out);
    let text = serde_json::to_string_pretty(&value).expect("sidecar serializes") + "\n";
    std::fs::write(&path, text)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub fn simulate(cmd: Simulate) -> CliResult<()> {
    match cmd {
        Simulate::ThreeClass { n, seed, out } => {
            let data = gen_three_class(n, seed)?;
            write_dataset(&out, &data, None)?;
            write_sidecar(
                &out,
                json!({ "generator": "three-class", "n": n, "seed": seed, "rng": RNG_NAME }),
            )?;
        }
        Simulate::Moe {
            model,
            n,
            seed,
            sampler,
            low,
            high,
            out,
        } => {
            let file = ModelFile::load(&model)?;
            let theta = file.params()?;
            let sampler = match sampler {
                Sampler::Normal => CovariateSampler::Normal { p: theta.p() },
                Sampler::Uniform => {
                    if !(low < high) {
                        return Err(CliError::usage(format!(
                            "--low {low} must be below --high {high}"
                        )));
                    }
                    CovariateSampler::Uniform {
                        p: theta.p(),
                        low,
                        high,
                    }
                }
            };
            let sample = gen_moe_sample(&theta, &sampler, n, seed)?;
            write_dataset(&out, &sample.data, Some(&sample.z))?;
            write_sidecar(
                &out,
                json!({
                    "generator": "moe",
                    "n": n,
                    "seed": seed,
                    "rng": RNG_NAME,
                    "sampler": sampler,
                    "model": ModelFile::from_params(&theta, &file.response, &file.covariates),
                }),
            )?;
        }
        Simulate::SwitchSignal {
            preset,
            spec,
            n,
            seed,
            out,
        } => {
            let mut signal = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        CliError::usage(format!("cannot read {}: {e}", path.display()))
                    })?;
                    serde_json::from_str::<SignalSpec>(&text).map_err(|e| {
                        CliError::usage(format!("invalid signal spec {}: {e}", path.display()))
                    })?
                }
                None => match preset {
                    Preset::Default => SignalSpec::default(),
                    Preset::FourRegime => SignalSpec::four_regime(0),
                },
            };
            if let Some(n) = n {
                signal.n = n;
            }
            if let Some(seed) = seed {
                signal.seed = seed;
            }
            let sample = gen_switch_signal(&signal)?;
            write_dataset(&out, &sample.data, Some(&sample.regime))?;
            write_sidecar(
                &out,
                json!({ "generator": "switch-signal", "spec": signal, "rng": RNG_NAME }),
            )?;
        }
    }
    Ok(())
}

struct Prepared {
    data: Dataset,
    family: Family,
    design: ExpertDesign,
    response: String,
    covariates: Vec<String>,
}

fn prepare(args: &DataArgs) -> CliResult<Prepared> {
    let name = match args.family {
        FamilyArg::Gaussian => "gaussian",
        FamilyArg::Logistic => "logistic",
        FamilyArg::Poisson => "poisson",
        FamilyArg::Multinomial => "multinomial",
    };
    let family = parse_family(name, args.k)?;
    let design = match args.degree {
        None => ExpertDesign::Linear,
        Some(degree) => ExpertDesign::Polynomial { degree },
    };
    let table = Table::read(&args.data)?;
    table.indices(std::slice::from_ref(&args.response))?;
    let covariates = args
        .covariates
        .clone()
        .unwrap_or_else(|| table.default_covariates(&args.response));
    if covariates.contains(&args.response) {
        return Err(CliError::usage(format!(
            "column '{}' cannot be both response and covariate",
            args.response
        )));
    }
    let data = table.dataset(&args.response, &covariates, family.response_kind())?;
    design.validate(data.p())?;
    Ok(Prepared {
        data,
        family,
        design,
        response: args.response.clone(),
        covariates,
    })
}

fn fit_config(args: &EstimationArgs) -> CliResult<FitConfig> {
    let config = FitConfig {
        max_cycles: args.max_cycles,
        rel_tol: args.rel_tol,
        variance_floor_factor: args.variance_floor_factor,
        n_starts: args.starts,
        seed: args.seed,
        irls_max_inner: args.irls_max_inner,
        threads: args.threads,
        accelerate: !args.no_accelerate,
    };
    config.validate()?;
    Ok(config)
}

fn model_for(fit: &FitResult, prep: &Prepared, covariance: bool) -> CliResult<ModelFile> {
    let model = ModelFile::from_fit(fit, &prep.data, &prep.response, &prep.covariates);
    if !covariance {
        return Ok(model);
    }
    let sw = sandwich_covariance(&prep.data, &fit.theta_hat)?;
    Ok(model.with_covariance(&sw))
}

fn print_fit(model: &ModelFile) {
    let family = match model.k {
        Some(k) => format!("{} (K = {k})", model.family),
        None => model.family.clone(),
    };
    println!("family {family}, g = {}, p = {}", model.g, model.p);
    if let Some(f) = &model.fit {
        println!(
            "n = {}, log quasi-likelihood {:.6}, dim {}, BIC {:.6}",
            f.n, f.log_ql, f.dim, f.bic
        );
        println!(
            "cycles {}, seed {}, converged {}, degenerate {}, separated {}",
            f.cycles, f.seed, f.converged, f.degenerate, f.separated
        );
    }
}

pub fn fit(args: FitArgs) -> CliResult<()> {
    if args.g == 0 {
        return Err(CliError::usage("--g must be at least 1"));
    }
    let prep = prepare(&args.data)?;
    let config = fit_config(&args.estimation)?;
    let res = multi_start_fit(&prep.data, args.g, prep.family, prep.design, &config)?;
    let model = model_for(&res, &prep, args.covariance)?;
    model.save(&args.out)?;
    print_fit(&model);
    Ok(())
}

fn bic_rows(rows: &[SelectionRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.g.to_string(),
                fmt_f64(r.log_ql),
                r.dim.to_string(),
                fmt_f64(r.bic),
                r.converged.to_string(),
                r.degenerate.to_string(),
            ]
        })
        .collect()
}

pub fn select(args: SelectArgs) -> CliResult<()> {
    if args.max_g == 0 {
        return Err(CliError::usage("--max-g must be at least 1"));
    }
    let prep = prepare(&args.data)?;
    let config = fit_config(&args.estimation)?;
    let grid: Vec<usize> = (1..=args.max_g).collect();
    let results = fit_grid(&prep.data, &grid, prep.family, prep.design, &config)?;
    let (rows, fits) = selection_rows(&prep.data, prep.family, prep.design, &grid, results);
    let header: Vec<String> = ["g", "logQL", "dim", "bic", "converged", "degenerate"]
        .map(String::from)
        .to_vec();
    write_csv(&args.bic_table, &header, bic_rows(&rows))?;
    println!(
        "{:>3} {:>16} {:>5} {:>16}  status",
        "g", "logQL", "dim", "BIC"
    );
    for r in &rows {
        let status = match &r.error {
            Some(e) => format!("failed: {e}"),
            None if r.degenerate => "degenerate".into(),
            None if !r.converged => "not converged".into(),
            None => "ok".into(),
        };
        println!(
            "{:>3} {:>16.6} {:>5} {:>16.6}  {status}",
            r.g, r.log_ql, r.dim, r.bic
        );
    }
    let Some(g_hat) = choose_g(&rows) else {
        return Err(CliError::Numerical(
            "no g produced a converged, non-degenerate fit".into(),
        ));
    };
    let fit = fits[g_hat - 1].as_ref().expect("selected fit exists");
    let model = model_for(fit, &prep, args.covariance)?;
    model.save(&args.out)?;
    println!("selected g = {g_hat}");
    print_fit(&model);
    Ok(())
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |j| format!("{prefix}{j}"))
}

pub fn predict(args: PredictArgs) -> CliResult<()> {
    let model = ModelFile::load(&args.model)?;
    let theta = model.params()?;
    let table = Table::read(&args.data)?;
    let xs = table.covariate_rows(&model.covariates)?;
    let mut header = model.covariates.clone();
    let outputs: Vec<Vec<String>> = match args.mode {
        Mode::Classify => {
            let k = match theta.family {
                Family::Multinomial { k } => k,
                other => {
                    return Err(CliError::usage(format!(
                        "classify needs a multinomial model, not {other}"
                    )))
                }
            };
            header.push("label".into());
            header.extend(numbered("prob", k));
            xs.iter()
                .map(|x| {
                    let c = classify_map(x, &theta)?;
                    Ok(std::iter::once(c.label.to_string())
                        .chain(c.posterior.iter().map(|&v| fmt_f64(v)))
                        .collect())
                })
                .collect::<CliResult<_>>()?
        }
        Mode::ClusterPosterior | Mode::ClusterGate => {
            let ys = if args.mode == Mode::ClusterPosterior {
                Some(table.responses(&model.response, theta.family.response_kind())?)
            } else {
                None
            };
            header.push("component".into());
            header.extend(numbered(
                if ys.is_some() { "tau" } else { "gate" },
                theta.g(),
            ));
            xs.iter()
                .enumerate()
                .map(|(i, x)| {
                    let c = match &ys {
                        Some(ys) => cluster_posterior(x, &ys[i], &theta)?,
                        None => cluster_gate(x, &theta)?,
                    };
                    Ok(std::iter::once(c.component.to_string())
                        .chain(c.posterior.iter().map(|&v| fmt_f64(v)))
                        .collect())
                })
                .collect::<CliResult<_>>()?
        }
        Mode::Mean | Mode::Variance => {
            let variance = args.mode == Mode::Variance;
            header.push(if variance { "variance" } else { "mean" }.into());
            xs.iter()
                .map(|x| {
                    let v = if variance {
                        predict_variance(x, &theta)?
                    } else {
                        predict_mean(x, &theta)?
                    };
                    Ok(vec![fmt_f64(v)])
                })
                .collect::<CliResult<_>>()?
        }
        Mode::MeanCi => {
            let cov = model.covariance_matrix()?.ok_or_else(|| {
                CliError::usage("model file has no covariance matrix; refit with --covariance")
            })?;
            header.extend(["mean", "lower", "upper"].map(String::from));
            xs.iter()
                .map(|x| {
                    let m = predict_mean(x, &theta)?;
                    let (lo, hi) = mean_ci(x, &theta, &cov, args.level)?;
                    Ok(vec![fmt_f64(m), fmt_f64(lo), fmt_f64(hi)])
                })
                .collect::<CliResult<_>>()?
        }
    };
    let rows = xs
        .iter()
        .zip(outputs)
        .map(|(x, out)| x.iter().map(|&v| fmt_f64(v)).chain(out).collect());
    write_csv(&args.out, &header, rows)
}

pub fn summarize(args: SummarizeArgs) -> CliResult<()> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::usage(format!(
            "--level must be in (0, 1), got {}",
            args.level
        )));
    }
    let model = ModelFile::load(&args.model)?;
    let theta = model.params()?;
    let cov = model.covariance_matrix()?;
    let names = theta.parameter_names();
    let values = theta.to_vector();
    let se: Option<Vec<f64>> = cov
        .as_ref()
        .map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect());
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + args.level / 2.0);

    print_fit(&model);
    println!(
        "design {:?}, response '{}', covariates {}",
        model.expert_design,
        model.response,
        model.covariates.join(",")
    );
    println!();
    println!(
        "{:<28} {:>16} {:>14}",
        "parameter", "estimate", "std. error"
    );
    for (j, (name, v)) in names.iter().zip(&values).enumerate() {
        match &se {
            Some(se) => println!("{name:<28} {v:>16.8} {:>14.8}", se[j]),
            None => println!("{name:<28} {v:>16.8} {:>14}", "-"),
        }
    }
    if se.is_some() {
        println!();
        println!("standard errors are sandwich estimates at the returned local maximum; other roots may exist");
    }

    if let Some(out) = &args.out {
        let header: Vec<String> = ["parameter", "estimate", "std_error", "lower", "upper"]
            .map(String::from)
            .to_vec();
        let rows = names
            .iter()
            .zip(&values)
            .enumerate()
            .map(|(j, (name, &v))| {
                let mut row = vec![name.clone(), fmt_f64(v)];
                match &se {
                    Some(se) => row.extend([
                        fmt_f64(se[j]),
                        fmt_f64(v - z * se[j]),
                        fmt_f64(v + z * se[j]),
                    ]),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
                row
            });
        write_csv(out, &header, rows)?;
    }
    Ok(())
}
