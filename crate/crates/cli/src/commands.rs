use epcache::attacks::{tune_theta_gray_box, AccuracyTable, HEADLINE_EPSILON};
use epcache::corruptions::corruption_errors;
use epcache::{
    build_cache, compress_cache, eval, extract_embeddings, generate_dataset, run_threat_scenario,
    tune_theta, CacheModel, Classifier, Compression, EmbeddingLayerId, KMeansConfig,
    RetrievalMethod, RobustnessReport, Split, ThreatModel,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::workspace::{CacheId, CompressionKind, ThetaChoice, Variant, Workspace};
use crate::{CacheArgs, Command, Method, Objective, Threat};

#[derive(Debug, Serialize, Deserialize)]
pub struct CleanSummary {
    pub backbone_top1: f64,
    pub cache_top1: f64,
    pub theta: f64,
    pub retrieval: String,
    pub cache_entries: usize,
    pub key_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorruptionSummary {
    pub backbone_mce: f64,
    pub cache_mce: f64,
    pub theta: f64,
    pub retrieval: String,
    pub backbone: RobustnessReport,
    pub cache: RobustnessReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Quadrant {
    pub robust_features: bool,
    pub cache: bool,
    pub gray_top1: f64,
    pub mce: f64,
}

fn layer_or(
    cfg: &mut ExperimentConfig,
    flag: Option<EmbeddingLayerId>,
) -> Result<EmbeddingLayerId, CliError> {
    if let Some(layer) = flag {
        cfg.cache.layer = layer.to_string();
    }
    cfg.layer()
}

fn resolve(
    cfg: &mut ExperimentConfig,
    args: &CacheArgs,
) -> Result<(CacheId, RetrievalMethod), CliError> {
    let layer = layer_or(cfg, args.layer)?;
    if let Some(r) = args.retrieval {
        cfg.cache.retrieval = r.to_string();
    }
    let id = CacheId {
        variant: args.variant,
        layer,
        compression: args.compression,
    };
    Ok((id, cfg.retrieval()?))
}

fn say(line: String) {
    println!("{line}");
}

pub fn dispatch(command: &Command, mut cfg: ExperimentConfig) -> Result<(), CliError> {
    let mut ws = Workspace::new(cfg.out_dir());
    let name = match command {
        Command::GenData => {
            let (train, val, test) = generate_dataset(&cfg.recipe()?.data)?;
            for set in [&train, &val, &test] {
                ws.write(&format!("data/{}.epds", set.split()), &set.to_bytes()?)?;
            }
            say(format!(
                "generated {} / {} / {} images ({} classes, {}x{})",
                train.len(),
                val.len(),
                test.len(),
                train.classes(),
                train.width(),
                train.width()
            ));
            "gen-data".to_owned()
        }
        Command::TrainBackbone { variant } => {
            let recipe = cfg.recipe()?;
            let train = ws.dataset(Split::Train)?;
            let model = match variant {
                Variant::Standard => recipe.standard(&train)?,
                Variant::Augmented => recipe.augmented(&train, &cfg.suite()?)?,
                Variant::Reference => recipe.reference(&train)?,
                Variant::Surrogate => recipe.surrogate(&train)?,
            };
            let val = ws.dataset(Split::Val)?;
            let acc = eval::accuracy(&model, &val)?;
            ws.write(&format!("backbones/{variant}.epbb"), &model.to_bytes())?;
            say(format!(
                "trained {variant} backbone: hidden {}, validation top-1 {acc:.4}",
                model.hidden_dim()
            ));
            format!("train-backbone-{variant}")
        }
        Command::Extract {
            variant,
            layer,
            split,
        } => {
            let layer = layer_or(&mut cfg, *layer)?;
            let model = ws.backbone(*variant)?;
            let data = ws.dataset(*split)?;
            let emb = extract_embeddings(&model, &data, layer)?;
            let rel = format!("embeddings/{variant}-{layer}-{split}.epem");
            ws.write(&rel, &emb.to_bytes()?)?;
            say(format!(
                "extracted {} x {} embeddings to {rel}",
                emb.len(),
                emb.dim()
            ));
            format!("extract-{variant}-{layer}-{split}")
        }
        Command::BuildCache {
            variant,
            layer,
            theta,
        } => {
            let layer = layer_or(&mut cfg, *layer)?;
            if let Some(t) = theta {
                cfg.cache.theta = *t;
            }
            let emb = ws.embeddings(*variant, layer, Split::Train)?;
            let train = ws.dataset(Split::Train)?;
            let cache = build_cache(&emb, train.classes(), cfg.cache.theta)?;
            let id = CacheId {
                variant: *variant,
                layer,
                compression: CompressionKind::None,
            };
            ws.write(&Workspace::cache_path(&id), &cache.to_bytes()?)?;
            say(format!(
                "built cache {}: {} entries, dim {}, theta {}",
                id.stem(),
                cache.len(),
                cache.key_dim(),
                cache.theta()
            ));
            format!("build-cache-{}", id.stem())
        }
        Command::TuneTheta {
            cache: args,
            objective,
        } => {
            let (id, _) = resolve(&mut cfg, args)?;
            let cache = ws.raw_cache(&id)?;
            let backbone = ws.backbone(id.variant)?;
            let val = ws.dataset(Split::Val)?;
            let grid = cfg.cache.grid.clone();
            let theta = match objective {
                Objective::Clean => tune_theta(&cache, &backbone, &val, &grid)?,
                Objective::Gray => {
                    let attack = cfg.attack(HEADLINE_EPSILON)?;
                    tune_theta_gray_box(&cache, &backbone, &val, &grid, &attack)?
                }
            };
            let objective = match objective {
                Objective::Clean => "clean",
                Objective::Gray => "gray",
            };
            ws.write_json(
                &Workspace::theta_path(&id),
                &ThetaChoice {
                    theta,
                    objective: objective.to_owned(),
                    grid,
                },
            )?;
            say(format!(
                "theta for {} ({objective} validation accuracy): {theta}",
                id.stem()
            ));
            format!("tune-theta-{}", id.stem())
        }
        Command::Compress {
            variant,
            layer,
            method,
            budget,
        } => {
            let layer = layer_or(&mut cfg, *layer)?;
            let source = CacheId {
                variant: *variant,
                layer,
                compression: CompressionKind::None,
            };
            let cache = ws.cache(&source)?;
            let c = &cfg.compression;
            let (spec, kind) = match method {
                Method::Kmeans => {
                    let k = budget.unwrap_or_else(|| {
                        ((cache.len() as f64 * c.kmeans_fraction).round() as usize).max(1)
                    });
                    let mut km = KMeansConfig::new(k, cfg.seed()?);
                    km.per_class = c.per_class;
                    km.iterations = c.iterations;
                    km.batch_size = c.batch_size;
                    (Compression::Cluster(km), CompressionKind::Kmeans)
                }
                Method::Pca => {
                    let d_out = budget.unwrap_or_else(|| {
                        ((cache.key_dim() as f64 * c.pca_fraction).round() as usize).max(1)
                    });
                    (Compression::Pca { d_out }, CompressionKind::Pca)
                }
            };
            let out = compress_cache(&cache, &spec)?;
            let id = CacheId {
                compression: kind,
                ..source
            };
            ws.write(&Workspace::cache_path(&id), &out.to_bytes()?)?;
            say(format!(
                "compressed {} to {}: {} entries, dim {}",
                source.stem(),
                id.stem(),
                out.len(),
                out.key_dim()
            ));
            format!("compress-{}", id.stem())
        }
        Command::EvalClean { cache: args } => {
            let (id, method) = resolve(&mut cfg, args)?;
            let cache = ws.cache(&id)?;
            let backbone = ws.backbone(id.variant)?;
            let test = ws.dataset(Split::Test)?;
            let model = CacheModel::new(&backbone, &cache, method)?;
            let summary = CleanSummary {
                backbone_top1: eval::accuracy(&backbone, &test)?,
                cache_top1: eval::accuracy(&model, &test)?,
                theta: cache.theta(),
                retrieval: method.to_string(),
                cache_entries: cache.len(),
                key_dim: cache.key_dim(),
            };
            let tag = id.tag(method);
            ws.write_json(&format!("reports/clean-{tag}.json"), &summary)?;
            say(format!(
                "{tag}: backbone top-1 {:.4}, cache top-1 {:.4}",
                summary.backbone_top1, summary.cache_top1
            ));
            format!("eval-clean-{tag}")
        }
        Command::EvalAdv {
            cache: args,
            threat,
            eps,
        } => {
            let (id, method) = resolve(&mut cfg, args)?;
            if !eps.is_empty() {
                cfg.attack.epsilons = eps.clone();
            }
            let eps = cfg.attack.epsilons.clone();
            let base = cfg.attack(HEADLINE_EPSILON)?;
            let backbone = ws.backbone(id.variant)?;
            let cache = ws.cache(&id)?;
            let test = ws.dataset(Split::Test)?;
            let (table, threat_name) = match threat {
                Threat::White => (
                    run_threat_scenario(
                        ThreatModel::WhiteBox,
                        &backbone,
                        Some(&cache),
                        method,
                        &test,
                        &eps,
                        &base,
                    )?,
                    "white",
                ),
                Threat::Gray => {
                    // The backbone's own row under the same inputs is its
                    // white-box accuracy.
                    let white = run_threat_scenario(
                        ThreatModel::WhiteBox,
                        &backbone,
                        None,
                        method,
                        &test,
                        &eps,
                        &base,
                    )?;
                    let mut gray = run_threat_scenario(
                        ThreatModel::GrayBox,
                        &backbone,
                        Some(&cache),
                        method,
                        &test,
                        &eps,
                        &base,
                    )?;
                    let mut rows = white.rows;
                    rows.append(&mut gray.rows);
                    gray.rows = rows;
                    (gray, "gray")
                }
                Threat::Black => {
                    let surrogate = ws.backbone(Variant::Surrogate)?;
                    (
                        run_threat_scenario(
                            ThreatModel::BlackBox(&surrogate),
                            &backbone,
                            Some(&cache),
                            method,
                            &test,
                            &eps,
                            &base,
                        )?,
                        "black",
                    )
                }
            };
            let tag = format!("{threat_name}-{}", id.tag(method));
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            ws.write(&format!("reports/adv-{tag}.csv"), &csv)?;
            ws.write_json(&format!("reports/adv-{tag}.json"), &table)?;
            print!("{}", String::from_utf8_lossy(&csv));
            for note in &table.notes {
                say(format!("note: {note}"));
            }
            format!("eval-adv-{tag}")
        }
        Command::EvalCorrupt { cache: args } => {
            let (id, method) = resolve(&mut cfg, args)?;
            let suite = cfg.suite()?;
            let reference = ws.backbone(Variant::Reference)?;
            let backbone = ws.backbone(id.variant)?;
            let cache = ws.cache(&id)?;
            let test = ws.dataset(Split::Test)?;
            let model = CacheModel::new(&backbone, &cache, method)?;
            let models: [&dyn Classifier; 3] = [&reference, &backbone, &model];
            let mut errors = corruption_errors(&models, &suite, &test)?.into_iter();
            let reference_errors = errors.next().unwrap();
            let backbone_report = RobustnessReport::from_errors(
                &suite,
                errors.next().unwrap(),
                reference_errors.clone(),
            )?;
            let cache_report =
                RobustnessReport::from_errors(&suite, errors.next().unwrap(), reference_errors)?;
            let tag = id.tag(method);
            for (who, report) in [("backbone", &backbone_report), ("cache", &cache_report)] {
                let mut csv = Vec::new();
                report.write_csv(&mut csv)?;
                ws.write(&format!("reports/corrupt-{tag}-{who}.csv"), &csv)?;
            }
            let summary = CorruptionSummary {
                backbone_mce: backbone_report.mce,
                cache_mce: cache_report.mce,
                theta: cache.theta(),
                retrieval: method.to_string(),
                backbone: backbone_report,
                cache: cache_report,
            };
            ws.write_json(&format!("reports/corrupt-{tag}.json"), &summary)?;
            say(format!(
                "{tag}: backbone mCE {:.4}, cache mCE {:.4}",
                summary.backbone_mce, summary.cache_mce
            ));
            format!("eval-corrupt-{tag}")
        }
        Command::Report {
            quadrants,
            sweep,
            gray_layer,
            mce_layer,
        } => {
            if !quadrants && !sweep {
                return Err(CliError::usage(
                    "report needs --quadrants and/or --sweep".into(),
                ));
            }
            if *quadrants {
                quadrant_report(&mut ws, *gray_layer, *mce_layer)?;
            }
            if *sweep {
                sweep_report(&mut ws)?;
            }
            "report".to_owned()
        }
    };
    ws.finish(&name, command, &cfg)?;
    Ok(())
}

fn quadrant_report(
    ws: &mut Workspace,
    gray_layer: EmbeddingLayerId,
    mce_layer: EmbeddingLayerId,
) -> Result<(), CliError> {
    let mut cells = Vec::new();
    for variant in [Variant::Standard, Variant::Augmented] {
        let adv_rel = format!("reports/adv-gray-{variant}-{gray_layer}.json");
        let adv: AccuracyTable = ws.report(
            &adv_rel,
            &format!("eval-adv --threat gray --variant {variant} --layer {gray_layer}"),
        )?;
        let corrupt: CorruptionSummary = ws.report(
            &format!("reports/corrupt-{variant}-{mce_layer}.json"),
            &format!("eval-corrupt --variant {variant} --layer {mce_layer}"),
        )?;
        let lookup = |model: &str, threat: &str| {
            adv.get(model, threat, HEADLINE_EPSILON).ok_or_else(|| {
                CliError::new(
                    "bad_artifact",
                    format!("{adv_rel} has no {model} row at epsilon {HEADLINE_EPSILON}"),
                )
            })
        };
        let robust = variant == Variant::Augmented;
        cells.push(Quadrant {
            robust_features: robust,
            cache: false,
            gray_top1: lookup("backbone", "white")?,
            mce: corrupt.backbone_mce,
        });
        cells.push(Quadrant {
            robust_features: robust,
            cache: true,
            gray_top1: lookup("cache", "gray")?,
            mce: corrupt.cache_mce,
        });
    }
    let mut csv = String::from("robust_features,cache,gray_top1_eps0.06,mce\n");
    for q in &cells {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            q.robust_features, q.cache, q.gray_top1, q.mce
        ));
    }
    ws.write("reports/quadrants.csv", csv.as_bytes())?;
    ws.write_json("reports/quadrants.json", &cells)?;
    say(format!(
        "{:<22}{:>22}{:>22}",
        "gray top-1 / mCE", "no cache", "cache"
    ));
    for (label, pair) in ["standard", "augmented"].iter().zip(cells.chunks(2)) {
        say(format!(
            "{:<22}{:>22}{:>22}",
            label,
            format!(
                "{:.1}% / {:.1}",
                pair[0].gray_top1 * 100.0,
                pair[0].mce * 100.0
            ),
            format!(
                "{:.1}% / {:.1}",
                pair[1].gray_top1 * 100.0,
                pair[1].mce * 100.0
            )
        ));
    }
    Ok(())
}

fn sweep_report(ws: &mut Workspace) -> Result<(), CliError> {
    let dir = ws.path("reports");
    let mut names: Vec<String> = match std::fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.starts_with("adv-") && n.ends_with(".json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if names.is_empty() {
        return Err(CliError::missing(&dir.join("adv-*.json"), "eval-adv"));
    }
    names.sort();
    let mut csv = String::from("source,model,threat,epsilon,top1\n");
    for name in names {
        let table: AccuracyTable = ws.report(&format!("reports/{name}"), "eval-adv")?;
        let source = name.trim_start_matches("adv-").trim_end_matches(".json");
        for r in &table.rows {
            csv.push_str(&format!(
                "{source},{},{},{},{:.6}\n",
                r.model, r.threat, r.epsilon, r.top1
            ));
        }
    }
    ws.write("reports/sweep.csv", csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
