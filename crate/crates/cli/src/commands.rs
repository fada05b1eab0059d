//! One function per subcommand. Each resolves its config, writes a
//! manifest, does the work and finalizes the manifest.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use causalrm::datagen::{read_dataset_checked, write_dataset, Dataset, Generator, Split};
use causalrm::evaluation::{
    evaluate, read_reports_csv, read_sycophancy_csv, render_summary, run_ablations, sycophancy_protocol,
    train_and_evaluate, write_reports_csv, write_sycophancy_csv, EvalReport, Experiment, SplitSet, SycophancyRow,
};
use causalrm::model::{read_checkpoint, write_checkpoint, Checkpoint, Variant};
use causalrm::training::{self, train_probe, write_log_csv, Channel, LOG_HEADER};

use crate::config::{usage, ConfigArgs};
use crate::manifest::ManifestWriter;
use crate::{summary, ProbeChannel};

const REPORT_HEADER: &str = "model,split,seed,n,accuracy,sigma_len,leakage,gold_corr,normalization";
const SYCOPHANCY_HEADER: &str = "model,seed,clean_on_clean,clean_on_hacked,hacked_on_hacked,delta";
const GRAD_CHECK_EPSILON: f64 = 1e-5;

fn with_manifest(
    out: &Path,
    command: &str,
    exp: &Experiment,
    inputs: Vec<String>,
    variant: Option<String>,
    work: impl FnOnce(&mut ManifestWriter) -> Result<()>,
) -> Result<()> {
    let mut m = ManifestWriter::start(out, command, exp, inputs, variant)?;
    let result = work(&mut m);
    let finished = m.finish(&result);
    result.and(finished)
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::parse(name)
        .ok_or_else(|| usage(format!("unknown variant '{name}'; valid variants: {}", Variant::valid_names())))
}

/// Accepts a dataset path with or without its `.jsonl` extension.
fn resolve_data(p: &Path) -> Result<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    let with_ext = p.with_extension("jsonl");
    if with_ext.is_file() {
        return Ok(with_ext);
    }
    bail!("dataset not found: {} (also tried {})", p.display(), with_ext.display())
}

fn load_data(p: &Path, exp: &Experiment, check_fingerprint: bool) -> Result<(PathBuf, Dataset)> {
    let path = resolve_data(p)?;
    let (ds, warning) = read_dataset_checked(&path, &exp.gen).with_context(|| format!("reading {}", path.display()))?;
    if let (true, Some(w)) = (check_fingerprint, warning) {
        eprintln!("note: {}: {w}", path.display());
    }
    Ok((path, ds))
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    if !p.is_file() {
        bail!("checkpoint not found: {}", p.display());
    }
    read_checkpoint(p).with_context(|| format!("reading {}", p.display()))
}

/// `full_seed3.ckpt` -> `full`.
fn model_name(ck: &Path) -> String {
    let stem = ck.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    match stem.rsplit_once("_seed") {
        Some((head, tail)) if !head.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) && !tail.is_empty() => {
            head.to_string()
        }
        _ => stem,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn gen_data(cfg: &ConfigArgs, out: &Path, hacked_train: bool) -> Result<()> {
    let exp = cfg.resolve()?;
    with_manifest(out, "gen-data", &exp, vec![], None, |m| {
        let g = Generator::new(&exp.gen)?;
        let mut sets: Vec<Dataset> = [Split::Train, Split::IdTest, Split::OodTest, Split::HackedTest]
            .into_iter()
            .map(|s| g.generate_split(s))
            .collect();
        if hacked_train {
            sets.push(g.generate_hacked_train());
        }
        for ds in &sets {
            let name = if ds.split == Split::Train && ds.perturbed {
                "hacked_train".to_string()
            } else {
                ds.split.to_string()
            };
            let path = out.join(format!("{name}.jsonl"));
            write_dataset(ds, &path).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} ({} pairs)", path.display(), ds.len());
            m.output(&path);
        }
        Ok(())
    })
}

pub fn train(cfg: &ConfigArgs, out: &Path, data: &Path, variant: &str, grad_check: bool) -> Result<()> {
    let exp = cfg.resolve()?;
    let variant = parse_variant(variant)?;
    let (path, ds) = load_data(data, &exp, cfg.config.is_some())?;
    let tcfg = exp.train.for_variant(variant);
    with_manifest(out, "train", &exp, vec![path.display().to_string()], Some(variant.name().into()), |m| {
        if grad_check {
            let r = training::grad_check(&ds, &tcfg, GRAD_CHECK_EPSILON)?;
            println!(
                "grad-check: max relative error {:.3e} at {}[{}] over {} scalars (analytic {:.6e}, numeric {:.6e})",
                r.max_rel_error, r.worst_param, r.worst_index, r.checked, r.analytic, r.numeric
            );
        }
        let outcome = training::train(&ds, &tcfg)?;
        let stem = format!("{}_seed{}", variant.name(), tcfg.seed);
        // every checkpoint carries its step; the final one is also under the bare stem
        let final_path = out.join(format!("{stem}.ckpt"));
        let named = outcome.checkpoints.iter().map(|ck| (ck, out.join(format!("{stem}_step{}.ckpt", ck.step))));
        for (ck, path) in named.chain(std::iter::once((outcome.final_checkpoint(), final_path))) {
            write_checkpoint(ck, &path).with_context(|| format!("writing {}", path.display()))?;
            m.output(&path);
        }
        let log_path = out.join(format!("{stem}_log.csv"));
        let mut w = create(&log_path)?;
        write_log_csv(&outcome.log, &mut w)?;
        w.flush()?;
        m.output(&log_path);
        if let Some(row) = outcome.log.last() {
            println!("{LOG_HEADER}");
            println!("{}", row.csv_line());
        }
        println!("wrote {}", out.join(format!("{stem}.ckpt")).display());
        Ok(())
    })
}

pub fn eval(cfg: &ConfigArgs, out: &Path, checkpoint: &Path, data: &[PathBuf], name: Option<String>) -> Result<()> {
    let exp = cfg.resolve()?;
    let ck = load_checkpoint(checkpoint)?;
    let name = name.unwrap_or_else(|| model_name(checkpoint));
    let sets = data.iter().map(|d| load_data(d, &exp, false)).collect::<Result<Vec<_>>>()?;
    let mut inputs = vec![checkpoint.display().to_string()];
    inputs.extend(sets.iter().map(|(p, _)| p.display().to_string()));
    with_manifest(out, "eval", &exp, inputs, None, |m| {
        let opts = exp.eval_options();
        let mut reports = Vec::new();
        for (_, ds) in &sets {
            let r = evaluate(&name, &ck, ds, &opts)?;
            let path = out.join(format!("{}.csv", r.file_stem()));
            let mut w = create(&path)?;
            write_reports_csv(std::slice::from_ref(&r), &mut w)?;
            w.flush()?;
            m.output(&path);
            let curve_path = out.join(format!("{}_length.csv", r.file_stem()));
            let mut w = create(&curve_path)?;
            r.curve.write_csv(&mut w)?;
            w.flush()?;
            m.output(&curve_path);
            reports.push(r);
        }
        print!("{}", render_summary(&reports));
        Ok(())
    })
}

pub fn probe(
    cfg: &ConfigArgs,
    out: &Path,
    checkpoint: &Path,
    data: &Path,
    channel: ProbeChannel,
    name: Option<String>,
) -> Result<()> {
    let exp = cfg.resolve()?;
    let ck = load_checkpoint(checkpoint)?;
    let name = name.unwrap_or_else(|| model_name(checkpoint));
    let (path, ds) = load_data(data, &exp, false)?;
    let channel = match channel {
        ProbeChannel::Causal => Channel::Causal,
        ProbeChannel::NonCausal => Channel::NonCausal,
    };
    if channel == Channel::NonCausal && !ck.ablation.factorized {
        bail!(usage(format!("{} has no non-causal latent to probe", checkpoint.display())));
    }
    let inputs = vec![checkpoint.display().to_string(), path.display().to_string()];
    with_manifest(out, "probe", &exp, inputs, None, |m| {
        let r = train_probe(&ds, &ck.params, channel, &exp.probe)?;
        let channel_name = match channel {
            Channel::Causal => "causal",
            Channel::NonCausal => "non_causal",
        };
        let csv_path = out.join(format!("probe_{name}_{}_seed{}_{channel_name}.csv", ds.split, ck.seed));
        let mut w = create(&csv_path)?;
        writeln!(w, "model,split,seed,channel,accuracy,n_train,n_test")?;
        writeln!(w, "{name},{},{},{channel_name},{},{},{}", ds.split, ck.seed, r.accuracy, r.n_train, r.n_test)?;
        w.flush()?;
        m.output(&csv_path);
        println!(
            "{channel_name} probe accuracy on {}: {:.4} ({} train / {} held-out pairs)",
            ds.split, r.accuracy, r.n_train, r.n_test
        );
        Ok(())
    })
}

pub fn ablate(cfg: &ConfigArgs, out: &Path, baseline: bool, sycophancy: bool) -> Result<()> {
    let exp = cfg.resolve()?;
    with_manifest(out, "ablate", &exp, vec![], None, |m| {
        let mut all_reports = Vec::new();
        let mut failures = Vec::new();
        for &seed in &exp.seeds {
            let e = exp.with_seed(seed);
            let matrix = run_ablations(&e.gen, &e.train, &e.eval_options())?;
            let path = out.join(format!("ablation_seed{seed}.csv"));
            let mut w = create(&path)?;
            matrix.write_csv(&mut w)?;
            w.flush()?;
            m.output(&path);
            for row in &matrix.rows {
                if let Some(err) = &row.error {
                    failures.push(format!("{} (seed {seed}): {err}", row.variant.name()));
                }
            }

            let mut reports = Vec::new();
            if baseline {
                let data = SplitSet::generate(&e.gen)?;
                reports.extend(train_and_evaluate(Variant::StandardRm, &data, &e)?.1);
            }
            reports.extend(matrix.reports().cloned());
            let path = out.join(format!("reports_seed{seed}.csv"));
            let mut w = create(&path)?;
            write_reports_csv(&reports, &mut w)?;
            w.flush()?;
            m.output(&path);
            all_reports.extend(reports);

            if sycophancy {
                let rows = sycophancy_protocol(&e.gen, &e.train, &[Variant::StandardRm, Variant::Full])?;
                let path = out.join(format!("sycophancy_seed{seed}.csv"));
                let mut w = create(&path)?;
                write_sycophancy_csv(&rows, &mut w)?;
                w.flush()?;
                m.output(&path);
            }
            println!("seed {seed}: done");
        }
        print!("{}", render_summary(&all_reports));
        if !failures.is_empty() {
            bail!("{} variant run(s) failed: {}", failures.len(), failures.join("; "));
        }
        Ok(())
    })
}

pub fn report(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!("report directory not found: {}", dir.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();

    let mut reports: Vec<EvalReport> = Vec::new();
    let mut seen = HashSet::new();
    let mut syc: Vec<SycophancyRow> = Vec::new();
    let mut inputs = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let header = text.lines().next().unwrap_or("");
        if header == REPORT_HEADER {
            for r in read_reports_csv(text.as_bytes()).with_context(|| format!("parsing {}", f.display()))? {
                if seen.insert((r.model.clone(), r.split, r.seed)) {
                    reports.push(r);
                }
            }
        } else if header == SYCOPHANCY_HEADER {
            syc.extend(read_sycophancy_csv(text.as_bytes()).with_context(|| format!("parsing {}", f.display()))?);
        } else {
            continue;
        }
        inputs.push(f.display().to_string());
    }
    if reports.is_empty() {
        bail!("no evaluation reports found in {}", dir.display());
    }
    // manifests carry the config; report has none of its own
    with_manifest(dir, "report", &Experiment::default(), inputs, None, |m| {
        let text = summary::render(&reports, &syc);
        let path = dir.join("summary.txt");
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        m.output(&path);
        print!("{text}");
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_name_strips_seed_suffix() {
        assert_eq!(model_name(Path::new("runs/full_seed3.ckpt")), "full");
        assert_eq!(model_name(Path::new("wo_kl_both_seed12.ckpt")), "wo_kl_both");
        assert_eq!(model_name(Path::new("mine.ckpt")), "mine");
        assert_eq!(model_name(Path::new("x_seedy.ckpt")), "x_seedy");
    }

    #[test]
    fn headers_match_the_library_writers() {
        let mut buf = Vec::new();
        write_sycophancy_csv(
            &[SycophancyRow {
                model: "m".into(),
                seed: 1,
                clean_on_clean: 0.5,
                clean_on_hacked: 0.5,
                hacked_on_hacked: 0.5,
                delta: 0.0,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().next(), Some(SYCOPHANCY_HEADER));
        let r = EvalReport {
            model: "m".into(),
            split: Split::IdTest,
            seed: 1,
            n: 1,
            accuracy: 1.0,
            sigma_len: 0.0,
            leakage: None,
            gold_corr: None,
            normalization: "min-max".into(),
            curve: Default::default(),
        };
        let mut buf = Vec::new();
        write_reports_csv(&[r], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().next(), Some(REPORT_HEADER));
    }
}
