//! Pipeline commands. Each reads the manifest and earlier artifacts from
//! the output directory and stages its own outputs, which are renamed into
//! place only when the command succeeds.
//!
//! Artifacts (relative to the output directory):
//!
//! | command    | writes |
//! |------------|--------|
//! | generate   | the manifest, `meshes/<id>.ply`, `landmarks/<id>.csv` |
//! | preprocess | `aligned/<id>.ply`, `preprocessed.csv` |
//! | fit        | `gpdssm.bin`, `lddmm.bin` |
//! | infer      | `latents_gpdssm.bin`, `latents_lddmm.bin` |
//! | classify   | `scores_<model>.csv`, `loocv_<model>.csv`, `angle_rule.csv` |
//! | evaluate   | `report.json`, `roc.svg` |
//! | visualize  | `viz/*.ply`, `viz/permutation.csv` |

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gpdssm_core::classify::{angle_rule, fit_angle_score, fit_gp_classifier, AngleClass, AngleRecord};
use gpdssm_core::cup::{generate_cup, rim_vertex_indices, sample_subject, Label};
use gpdssm_core::eval::{class_average, dysplastic_mode_pca, loocv_scores, permutation_map, rank_auc};
use gpdssm_core::exec::Executor;
use gpdssm_core::gpdssm::{fit, infer_latent, select_template, training_reconstructions, GpdssmState};
use gpdssm_core::lddmm::{fit_atlas, fit_momenta, momenta_pca};
use gpdssm_core::preprocess::{extract_cup, rigid_align, AlignmentConfig};
use gpdssm_core::varifold::VarifoldKernel;
use gpdssm_core::TriMesh;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{read_bytes, GpdssmArchive, LatentArchive, LatentRow, LddmmArchive};
use crate::config::PipelineConfig;
use crate::error::{AppError, Result};
use crate::io::{landmarks_string, load_landmarks, load_mesh, Staged};
use crate::manifest::{Manifest, ManifestRow, Split};
use crate::report::{model_report, paired_difference, roc_svg, EvalReport, Section};

pub const GPDSSM_ARCHIVE: &str = "gpdssm.bin";
pub const LDDMM_ARCHIVE: &str = "lddmm.bin";
pub const PREPROCESSED_MANIFEST: &str = "preprocessed.csv";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelSel {
    Gpdssm,
    Lddmm,
    Angles,
    All,
}

impl ModelSel {
    fn has(self, m: Model) -> bool {
        match self {
            ModelSel::All => true,
            ModelSel::Gpdssm => m == Model::Gpdssm,
            ModelSel::Lddmm => m == Model::Lddmm,
            ModelSel::Angles => m == Model::Angles,
        }
    }

    fn models(self) -> Vec<Model> {
        Model::ALL.into_iter().filter(|&m| self.has(m)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Gpdssm,
    Lddmm,
    Angles,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Gpdssm, Model::Lddmm, Model::Angles];

    pub fn name(self) -> &'static str {
        match self {
            Model::Gpdssm => "gpdssm",
            Model::Lddmm => "lddmm",
            Model::Angles => "angles",
        }
    }
}

pub fn scores_file(m: Model) -> String {
    format!("scores_{}.csv", m.name())
}

pub fn loocv_file(m: Model) -> String {
    format!("loocv_{}.csv", m.name())
}

pub fn latents_file(m: Model) -> String {
    format!("latents_{}.bin", m.name())
}

fn check_id(id: &str) -> Result<()> {
    if id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && !id.starts_with('.') {
        Ok(())
    } else {
        Err(AppError::validation(format!("id `{id}` is not usable as a file name (use letters, digits, `_`, `-`, `.`)")))
    }
}

fn row_mesh(manifest: &Manifest, row: &ManifestRow) -> Result<TriMesh> {
    let p = row
        .mesh_path
        .as_ref()
        .ok_or_else(|| AppError::validation(format!("row `{}` has no mesh_path", row.id)))?;
    Ok(load_mesh(&manifest.resolve(p))?.mesh)
}

fn rows_with_mesh(manifest: &Manifest, split: Split) -> Vec<&ManifestRow> {
    manifest.split(split).into_iter().filter(|r| r.mesh_path.is_some()).collect()
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Synthetic labeled cups with rim landmarks, angles and a stratified split.
pub fn generate(manifest_path: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = cfg.cup();
    let mut staged = Staged::default();
    let mut rows = Vec::new();
    for (label, prefix) in [(Label::Control, "ctrl"), (Label::Dysplastic, "dys")] {
        let n = cfg.count_per_class;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_test = ((n as f64 * cfg.test_fraction).round() as usize).min(n.saturating_sub(1)).max(usize::from(n >= 2));
        let mut is_test = vec![false; n];
        order[..n_test].iter().for_each(|&i| is_test[i] = true);
        for (j, &test) in is_test.iter().enumerate() {
            let s = sample_subject(label, &template, &mut rng);
            let id = format!("{prefix}_{j:03}");
            let mesh = generate_cup(&s.cup)?;
            let rim: Vec<_> = rim_vertex_indices(&s.cup).into_iter().map(|i| mesh.vertices()[i]).collect();
            let mesh_path = out.join("meshes").join(format!("{id}.ply"));
            let lm_path = out.join("landmarks").join(format!("{id}.csv"));
            staged.write_mesh(&mesh, &mesh_path, false)?;
            staged.write(&lm_path, landmarks_string(&rim).as_bytes())?;
            let split = if test { Split::Test } else { Split::Train };
            rows.push(ManifestRow::new(
                id,
                Some(relative_to(&mesh_path, &base)),
                Some(relative_to(&lm_path, &base)),
                Some(label),
                Some(s.lcea),
                Some(s.ai),
                split,
            ));
        }
    }
    let manifest = Manifest::new(rows, base)?;
    staged.write(manifest_path, manifest.to_csv()?.as_bytes())?;
    staged.commit()?;
    Ok(manifest)
}

/// Cup extraction (rows with landmarks) and similarity alignment to a
/// reference training mesh. Writes a manifest pointing at the results.
pub fn preprocess<E: Executor>(manifest: &Manifest, out: &Path, cfg: &PipelineConfig, exec: &E) -> Result<Manifest> {
    let rows: Vec<&ManifestRow> = manifest.rows().iter().filter(|r| r.mesh_path.is_some()).collect();
    if rows.is_empty() {
        return Err(AppError::validation("no manifest row has a mesh_path"));
    }
    rows.iter().try_for_each(|r| check_id(&r.id))?;
    let loaded = exec.map(rows.len(), |i| -> Result<TriMesh> {
        let row = rows[i];
        let mesh = row_mesh(manifest, row)?;
        match (&row.landmarks_path, cfg.extract) {
            (Some(lp), true) => {
                let lm = load_landmarks(&manifest.resolve(lp))?;
                extract_cup(&mesh, &lm).map_err(|e| AppError::Model(e.for_id(&row.id)))
            }
            _ => Ok(mesh),
        }
    });
    let meshes: Vec<TriMesh> = loaded.into_iter().collect::<Result<_>>()?;
    let train: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].split == Split::Train).collect();
    if train.is_empty() {
        return Err(AppError::validation("alignment needs at least one training mesh"));
    }
    let reference = if cfg.align_reference < 0 {
        let train_meshes: Vec<TriMesh> = train.iter().map(|&i| meshes[i].clone()).collect();
        let diag = median(train_meshes.iter().map(|m| m.bbox_diagonal()).collect());
        let k = VarifoldKernel::new(cfg.sigma_pos_scale * diag)?;
        train[select_template(&train_meshes, &k, 1, exec)?.0]
    } else {
        *train.get(cfg.align_reference as usize).ok_or_else(|| {
            AppError::validation(format!("align_reference {} exceeds {} training meshes", cfg.align_reference, train.len()))
        })?
    };
    log::info!("alignment reference: {}", rows[reference].id);
    let target = &meshes[reference];
    let kernel = VarifoldKernel::for_template(target);
    let align_cfg = AlignmentConfig {
        max_iters: cfg.align_iters,
        step_size: cfg.align_lr,
        ..AlignmentConfig::for_target(target, kernel)
    };
    let aligned = exec.map(rows.len(), |i| -> Result<TriMesh> {
        if !cfg.align || i == reference {
            return Ok(meshes[i].clone());
        }
        let a = rigid_align(&meshes[i], target, &align_cfg).map_err(|e| AppError::Model(e.for_id(&rows[i].id)))?;
        Ok(a.aligned)
    });
    let mut staged = Staged::default();
    let mut by_id = HashMap::new();
    for (row, mesh) in rows.iter().zip(aligned) {
        let p = out.join("aligned").join(format!("{}.ply", row.id));
        staged.write_mesh(&mesh?, &p, false)?;
        by_id.insert(row.id.clone(), p);
    }
    let manifest_path = out.join(PREPROCESSED_MANIFEST);
    let new_rows = manifest
        .rows()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(p) = by_id.get(&r.id) {
                r.mesh_path = Some(relative_to(p, out));
                r.landmarks_path = None;
            }
            r
        })
        .collect();
    let new_manifest = Manifest::new(new_rows, out)?;
    staged.write(&manifest_path, new_manifest.to_csv()?.as_bytes())?;
    staged.commit()?;
    Ok(new_manifest)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

trait ForId {
    fn for_id(self, id: &str) -> gpdssm_core::Error;
}

impl ForId for gpdssm_core::Error {
    fn for_id(self, id: &str) -> gpdssm_core::Error {
        gpdssm_core::Error::Shape { id: id.to_string(), source: Box::new(self) }
    }
}

/// Artifacts produced by [`fit_models`].
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub gpdssm: Option<GpdssmArchive>,
    pub lddmm: Option<LddmmArchive>,
}

/// Fits the shape models on training rows.
pub fn fit_models<E: Executor>(manifest: &Manifest, out: &Path, cfg: &PipelineConfig, model: ModelSel, exec: &E) -> Result<Fitted> {
    let mut fitted = Fitted { gpdssm: None, lddmm: None };
    if !model.has(Model::Gpdssm) && !model.has(Model::Lddmm) {
        log::info!("angle model has no shape fit; nothing to do");
        return Ok(fitted);
    }
    let rows = rows_with_mesh(manifest, Split::Train);
    if rows.len() < 2 {
        return Err(AppError::validation(format!("fitting needs at least two training meshes, found {}", rows.len())));
    }
    let ids: Vec<String> = rows.iter().map(|r| r.id.clone()).collect();
    let meshes: Vec<TriMesh> = rows.iter().map(|r| row_mesh(manifest, r)).collect::<Result<_>>()?;
    let (init, data) = GpdssmState::initialize(ids.clone(), &meshes, &cfg.model(), exec)?;
    let mut staged = Staged::default();
    let (template, spatial, varifold, beta) = (init.template.clone(), init.spatial, init.varifold, init.beta);
    if model.has(Model::Gpdssm) {
        let (state, trace) = fit(init, &data, &cfg.fit(), exec)?;
        log::info!("gpdssm loss {:.6e} -> {:.6e}", trace[0], trace[trace.len() - 1]);
        let a = GpdssmArchive { ids: ids.clone(), state, trace };
        staged.write(&out.join(GPDSSM_ARCHIVE), &a.to_bytes())?;
        fitted.gpdssm = Some(a);
    }
    if model.has(Model::Lddmm) {
        let (atlas, trace) = fit_atlas(template, spatial, varifold, &meshes, &ids, beta, &cfg.atlas(), exec)?;
        let pca = momenta_pca(&atlas.momenta, cfg.latent_dim)?;
        let a = LddmmArchive { ids, atlas, pca, trace };
        staged.write(&out.join(LDDMM_ARCHIVE), &a.to_bytes())?;
        fitted.lddmm = Some(a);
    }
    staged.commit()?;
    Ok(fitted)
}

pub fn load_gpdssm(out: &Path) -> Result<GpdssmArchive> {
    let p = out.join(GPDSSM_ARCHIVE);
    GpdssmArchive::from_bytes(&read_bytes(&p, "GPDSSM model", "fit --model gpdssm")?, &p)
}

pub fn load_lddmm(out: &Path) -> Result<LddmmArchive> {
    let p = out.join(LDDMM_ARCHIVE);
    LddmmArchive::from_bytes(&read_bytes(&p, "LDDMM atlas", "fit --model lddmm")?, &p)
}

pub fn load_latents(out: &Path, m: Model) -> Result<LatentArchive> {
    let p = out.join(latents_file(m));
    LatentArchive::from_bytes(&read_bytes(&p, &format!("{} test latents", m.name()), "infer")?, &p)
}

/// Latent representations of every test row with a mesh.
pub fn infer<E: Executor>(manifest: &Manifest, out: &Path, cfg: &PipelineConfig, model: ModelSel, exec: &E) -> Result<()> {
    let rows = rows_with_mesh(manifest, Split::Test);
    if rows.is_empty() {
        return Err(AppError::validation("no test row has a mesh_path"));
    }
    let mut staged = Staged::default();
    if model.has(Model::Gpdssm) {
        let a = load_gpdssm(out)?;
        let seeds = training_reconstructions(&a.state, exec)?;
        let icfg = cfg.infer();
        let res = exec.map(rows.len(), |i| -> Result<LatentRow> {
            let mesh = row_mesh(manifest, rows[i])?;
            let inf = infer_latent(&a.state, &mesh, &seeds, &icfg).map_err(|e| e.for_id(&rows[i].id))?;
            Ok(LatentRow { id: rows[i].id.clone(), mean: inf.posterior.mean, sd: inf.posterior.sd, energy: inf.energy })
        });
        let rows_out = res.into_iter().collect::<Result<Vec<_>>>()?;
        let la = LatentArchive { model: Model::Gpdssm.name().into(), rows: rows_out };
        staged.write(&out.join(latents_file(Model::Gpdssm)), &la.to_bytes())?;
    }
    if model.has(Model::Lddmm) {
        let a = load_lddmm(out)?;
        let acfg = cfg.atlas();
        let at = &a.atlas;
        let res = exec.map(rows.len(), |i| -> Result<LatentRow> {
            let mesh = row_mesh(manifest, rows[i])?;
            let (alpha, trace) = fit_momenta(&at.template, &at.spatial, &at.varifold, &mesh, at.beta, at.lambda, &acfg)
                .map_err(|e| e.for_id(&rows[i].id))?;
            Ok(LatentRow {
                id: rows[i].id.clone(),
                mean: a.pca.project(&alpha),
                sd: Vec::new(),
                energy: trace.last().copied().unwrap_or(f64::NAN),
            })
        });
        let rows_out = res.into_iter().collect::<Result<Vec<_>>>()?;
        let la = LatentArchive { model: Model::Lddmm.name().into(), rows: rows_out };
        staged.write(&out.join(latents_file(Model::Lddmm)), &la.to_bytes())?;
    }
    staged.commit()
}

fn scores_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("id,probability\n");
    for (id, p) in rows {
        let _ = writeln!(s, "{id},{p}");
    }
    s
}

/// Reads a `id,probability` file; `None` when it does not exist.
pub fn read_scores(path: &Path) -> Result<Option<Vec<(String, f64)>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = crate::io::read_text(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<(String, f64)>().enumerate() {
        out.push(rec.map_err(|e| AppError::format(path, i + 2, e.to_string()))?);
    }
    Ok(Some(out))
}

/// Training inputs paired with their labels, matched by id.
fn labeled_inputs(ids: &[String], inputs: Vec<Vec<f64>>, labels: &HashMap<&str, Label>) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let y = ids
        .iter()
        .map(|id| {
            labels
                .get(id.as_str())
                .map(|&l| l == Label::Dysplastic)
                .ok_or_else(|| AppError::validation(format!("model row `{id}` is not a labeled training row of this manifest")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, y))
}

/// Held-out probabilities for the training set and test probabilities.
type Scored = (Vec<(String, f64)>, Vec<(String, f64)>);

fn gp_scores<E: Executor>(
    train_ids: &[String],
    x: &[Vec<f64>],
    y: &[bool],
    test: &[(String, Vec<f64>)],
    cfg: &PipelineConfig,
    exec: &E,
) -> Result<Scored> {
    let ccfg = cfg.classifier();
    let clf = fit_gp_classifier(x, y, &ccfg)?;
    let test_scores = test.iter().map(|(id, z)| (id.clone(), clf.predict_proba(z))).collect();
    let loo = loocv_scores(
        y,
        |tr, i| {
            let xs: Vec<Vec<f64>> = tr.iter().map(|&j| x[j].clone()).collect();
            let ys: Vec<bool> = tr.iter().map(|&j| y[j]).collect();
            Ok(fit_gp_classifier(&xs, &ys, &ccfg)?.predict_proba(&x[i]))
        },
        exec,
    )?;
    if !loo.skipped.is_empty() {
        log::warn!("leave-one-out skipped {} single-class folds", loo.skipped.len());
    }
    let loo_scores = train_ids.iter().zip(&loo.scores).filter_map(|(id, s)| s.map(|s| (id.clone(), s))).collect();
    Ok((loo_scores, test_scores))
}

/// Probabilities of dysplasia for test rows, plus leave-one-out
/// probabilities on the training rows.
pub fn classify<E: Executor>(manifest: &Manifest, out: &Path, cfg: &PipelineConfig, model: ModelSel, exec: &E) -> Result<()> {
    let train = manifest.train_labels()?;
    let labels: HashMap<&str, Label> = train.iter().map(|(r, l)| (r.id.as_str(), *l)).collect();
    let mut staged = Staged::default();
    let mut write = |m: Model, scored: Scored| -> Result<()> {
        staged.write(&out.join(loocv_file(m)), scores_csv(&scored.0).as_bytes())?;
        staged.write(&out.join(scores_file(m)), scores_csv(&scored.1).as_bytes())
    };
    if model.has(Model::Gpdssm) {
        let a = load_gpdssm(out)?;
        let test = load_latents(out, Model::Gpdssm)?;
        let inputs = a.state.latents.iter().map(|q| q.mean.clone()).collect();
        let (x, y) = labeled_inputs(&a.ids, inputs, &labels)?;
        let t: Vec<(String, Vec<f64>)> = test.rows.into_iter().map(|r| (r.id, r.mean)).collect();
        write(Model::Gpdssm, gp_scores(&a.ids, &x, &y, &t, cfg, exec)?)?;
    }
    if model.has(Model::Lddmm) {
        let a = load_lddmm(out)?;
        let test = load_latents(out, Model::Lddmm)?;
        let inputs = (0..a.ids.len()).map(|i| a.pca.embeddings.row(i).iter().copied().collect()).collect();
        let (x, y) = labeled_inputs(&a.ids, inputs, &labels)?;
        let t: Vec<(String, Vec<f64>)> = test.rows.into_iter().map(|r| (r.id, r.mean)).collect();
        write(Model::Lddmm, gp_scores(&a.ids, &x, &y, &t, cfg, exec)?)?;
    }
    let mut rule_csv = None;
    if model.has(Model::Angles) {
        let record = |r: &ManifestRow| -> Result<Option<AngleRecord>> {
            let Some((lcea, ai)) = r.angles() else { return Ok(None) };
            let rec = AngleRecord::new(lcea, ai).map_err(|e| e.for_id(&r.id))?;
            if !rec.is_plausible() {
                log::warn!("row `{}`: implausible angles LCEA {lcea}, AI {ai}", r.id);
            }
            Ok(Some(rec))
        };
        let mut ids = Vec::new();
        let mut recs = Vec::new();
        let mut y = Vec::new();
        for (r, l) in &train {
            if let Some(rec) = record(r)? {
                ids.push(r.id.clone());
                recs.push(rec);
                y.push(*l == Label::Dysplastic);
            }
        }
        if recs.is_empty() {
            return Err(AppError::validation("angle model needs training rows with lcea and ai"));
        }
        let scorer = fit_angle_score(&recs, &y)?;
        let mut test = Vec::new();
        let mut rules = String::from("id,lcea,ai,class\n");
        for r in manifest.split(Split::Test) {
            if let Some(rec) = record(r)? {
                test.push((r.id.clone(), scorer.predict_proba(&rec)));
                let class = match angle_rule(&rec) {
                    AngleClass::Dysplastic => "dysplastic",
                    AngleClass::Borderline => "borderline",
                    AngleClass::Control => "control",
                };
                let _ = writeln!(rules, "{},{},{},{class}", r.id, rec.lcea, rec.ai);
            }
        }
        let loo = loocv_scores(
            &y,
            |tr, i| {
                let rs: Vec<AngleRecord> = tr.iter().map(|&j| recs[j]).collect();
                let ys: Vec<bool> = tr.iter().map(|&j| y[j]).collect();
                Ok(fit_angle_score(&rs, &ys)?.predict_proba(&recs[i]))
            },
            exec,
        )?;
        let loo_scores = ids.iter().zip(&loo.scores).filter_map(|(id, s)| s.map(|s| (id.clone(), s))).collect();
        write(Model::Angles, (loo_scores, test))?;
        rule_csv = Some(rules);
    }
    if let Some(rules) = rule_csv {
        staged.write(&out.join("angle_rule.csv"), rules.as_bytes())?;
    }
    staged.commit()
}

/// Test-set report for every selected model. Models without scores are
/// reported as absent.
pub fn evaluate<E: Executor>(manifest: &Manifest, out: &Path, cfg: &PipelineConfig, model: ModelSel, exec: &E) -> Result<EvalReport> {
    let train: HashMap<&str, bool> =
        manifest.labeled_train().into_iter().map(|(r, l)| (r.id.as_str(), l == Label::Dysplastic)).collect();
    let test: HashMap<&str, bool> = manifest
        .evaluation_labels()
        .into_iter()
        .filter_map(|(r, l)| l.map(|l| (r.id.as_str(), l == Label::Dysplastic)))
        .collect();
    let mut report = EvalReport {
        threshold: cfg.threshold,
        bootstrap: cfg.bootstrap,
        models: Default::default(),
        paired_auc_differences: Vec::new(),
    };
    let mut present: Vec<(Model, HashMap<String, f64>)> = Vec::new();
    for m in model.models() {
        let Some(scores) = read_scores(&out.join(scores_file(m)))? else {
            report.models.insert(m.name().into(), Section::absent(format!("no {} scores; run classify", scores_file(m))));
            continue;
        };
        let (s, l): (Vec<f64>, Vec<bool>) = scores.iter().filter_map(|(id, p)| test.get(id.as_str()).map(|&l| (*p, l))).unzip();
        if s.len() < scores.len() {
            log::warn!("{}: {} scored rows have no test label", m.name(), scores.len() - s.len());
        }
        let mut r = model_report(&s, &l, cfg.threshold, cfg.bootstrap, cfg.seed, exec)?;
        if let Some(loo) = read_scores(&out.join(loocv_file(m)))? {
            let (ls, ll): (Vec<f64>, Vec<bool>) = loo.iter().filter_map(|(id, p)| train.get(id.as_str()).map(|&l| (*p, l))).unzip();
            r.loocv_auc = rank_auc(&ls, &ll).ok();
        }
        report.models.insert(m.name().into(), Section::Present(r));
        present.push((m, scores.into_iter().collect()));
    }
    for i in 0..present.len() {
        for j in i + 1..present.len() {
            let (ma, sa) = &present[i];
            let (mb, sb) = &present[j];
            let mut ids: Vec<&String> = sa.keys().filter(|id| sb.contains_key(*id) && test.contains_key(id.as_str())).collect();
            ids.sort();
            let a: Vec<f64> = ids.iter().map(|id| sa[*id]).collect();
            let b: Vec<f64> = ids.iter().map(|id| sb[*id]).collect();
            let l: Vec<bool> = ids.iter().map(|id| test[id.as_str()]).collect();
            match paired_difference((ma.name(), &a), (mb.name(), &b), &l, cfg.bootstrap, cfg.seed, exec) {
                Ok(d) => report.paired_auc_differences.push(d),
                Err(e) => log::warn!("paired difference {} vs {}: {e}", ma.name(), mb.name()),
            }
        }
    }
    let mut staged = Staged::default();
    let json = serde_json::to_string_pretty(&report).map_err(|e| AppError::validation(e.to_string()))?;
    staged.write(&out.join(REPORT), json.as_bytes())?;
    staged.write(&out.join("roc.svg"), roc_svg(&report).as_bytes())?;
    staged.commit()?;
    Ok(report)
}

/// Class averages, permutation heat map and dysplastic residual modes from
/// the fitted GPDSSM and the training labels.
pub fn visualize<E: Executor>(manifest: &Manifest, out: &Path, cfg: &PipelineConfig, exec: &E) -> Result<()> {
    let a = load_gpdssm(out)?;
    let train = manifest.train_labels()?;
    let labels: HashMap<&str, Label> = train.iter().map(|(r, l)| (r.id.as_str(), *l)).collect();
    let latents: Vec<Vec<f64>> = a.state.latents.iter().map(|q| q.mean.clone()).collect();
    let (latents, y) = labeled_inputs(&a.ids, latents, &labels)?;
    let state = &a.state;
    let recon: Vec<TriMesh> = exec.map(latents.len(), |i| state.reconstruct(&latents[i])).into_iter().collect::<std::result::Result<_, _>>()?;
    let sets: Vec<Vec<_>> = recon.iter().map(|m| m.vertices().to_vec()).collect();
    let tmesh = state.template.mesh();
    let (ctrl, dys) = class_average(&sets, &y)?;
    let disp: Vec<Vec<f64>> = sets.iter().map(|s| s.iter().zip(tmesh.vertices()).map(|(p, t)| (p - t).norm()).collect()).collect();
    let map = permutation_map(&disp, &y, cfg.n_perm, cfg.seed, cfg.alpha, exec)?;
    let modes = dysplastic_mode_pca(state, &latents, &y, exec)?;

    let dir = out.join("viz");
    let mut staged = Staged::default();
    staged.write_mesh(&tmesh.with_vertices(ctrl), &dir.join("class_average_control.ply"), false)?;
    staged.write_mesh(&tmesh.with_vertices(dys), &dir.join("class_average_dysplastic.ply"), false)?;
    let heat: Vec<f64> = map.statistic.iter().zip(&map.significant).map(|(s, &f)| if f { *s } else { 0.0 }).collect();
    staged.write_mesh(&tmesh.clone().with_scalar(heat)?, &dir.join("permutation_significant.ply"), true)?;
    let mut csv = String::from("vertex,statistic,p_raw,p_adjusted,significant\n");
    for v in 0..map.statistic.len() {
        let _ = writeln!(csv, "{v},{},{},{},{}", map.statistic[v], map.p_raw[v], map.p_adjusted[v], map.significant[v]);
    }
    staged.write(&dir.join("permutation.csv"), csv.as_bytes())?;
    staged.write_mesh(&modes.minus, &dir.join("mode_minus.ply"), false)?;
    staged.write_mesh(&modes.plus, &dir.join("mode_plus.ply"), false)?;
    staged.write_mesh(&modes.heat, &dir.join("mode_heat.ply"), true)?;
    staged.commit()
}
