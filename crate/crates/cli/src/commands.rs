use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use damda::discovery::{select_h, EmConfig, HSelection};
use damda::edda::{fit_edda, predict_map, CovStructure, EddaModel};
use damda::io::{
    encode_labels, read_csv_table, read_json, save_edda, write_csv_table, write_json, ColumnAlignment, DamdaModelFile, EddaModelFile,
    DataTable,
};
use damda::sim::{ari, generate_world, matched_error, write_metrics_csv, MetricsRow, ScenarioConfig};
use damda::varsel::{greedy_search, VarSelConfig};
use damda::{DamdaError, DamdaModel};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::manifest::Recorder;
use crate::{DiscoverArgs, EvaluateArgs, HRange, LearnArgs, SelectArgs, SimulateArgs};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_LEARN: u8 = 3;
pub const EXIT_ALIGN: u8 = 4;
pub const EXIT_FIT: u8 = 5;
pub const EXIT_OUTPUT: u8 = 6;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

type Outcome<T = ()> = Result<T, Failure>;

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

/// Maps a library error raised at a given stage to an exit code. Parse and
/// alignment errors keep their own codes wherever they surface.
fn at(code: u8) -> impl Fn(DamdaError) -> Failure {
    move |e| {
        let code = match e {
            DamdaError::MissingColumns(_) => EXIT_ALIGN,
            DamdaError::Parse { .. } | DamdaError::Csv(_) | DamdaError::Json(_) => EXIT_INPUT,
            _ => code,
        };
        Failure::new(code, e.to_string())
    }
}

fn in_file(path: &Path, e: DamdaError) -> Failure {
    let f = at(EXIT_INPUT)(e);
    Failure::new(f.code, format!("{}: {}", path.display(), f.message))
}

fn open(path: &Path, rec: &mut Recorder) -> Outcome<BufReader<File>> {
    rec.input(path);
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn read_table(path: &Path, labels: Option<&str>, rec: &mut Recorder) -> Outcome<(DataTable, Option<Vec<String>>)> {
    read_csv_table(open(path, rec)?, labels).map_err(|e| match e {
        // an absent label column is malformed input, not a model mismatch
        DamdaError::MissingColumns(c) => Failure::new(EXIT_INPUT, format!("{}: no column named {}", path.display(), c.join(", "))),
        e => in_file(path, e),
    })
}

/// Loads a learned model. A model file without variable names is aligned
/// by position: its variables are taken to be the first `P` test columns.
fn load_model(path: &Path, header: &[String], rec: &mut Recorder) -> Outcome<EddaModel> {
    let mut file: EddaModelFile = read_json(open(path, rec)?).map_err(|e| in_file(path, e))?;
    if file.variable_names.is_empty() && file.P > 0 {
        if header.len() < file.P {
            return Err(Failure::new(EXIT_ALIGN, format!("model has {} unnamed variables but the test data only {} columns", file.P, header.len())));
        }
        log::warn!("{} has no variable names; aligning the first {} test columns by position", path.display(), file.P);
        file.variable_names = header[..file.P].to_vec();
    }
    EddaModel::try_from(file).map_err(|e| in_file(path, e))
}

/// Creates `path` and hands a buffered writer to `body`; any failure is an
/// output error.
fn write_file(path: &Path, rec: &mut Recorder, body: impl FnOnce(&mut BufWriter<File>) -> damda::Result<()>) -> Outcome {
    rec.output(path);
    let fail = |e: String| Failure::new(EXIT_OUTPUT, format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| fail(e.to_string()))?);
    body(&mut w).map_err(|e| fail(e.to_string()))?;
    w.flush().map_err(|e| fail(e.to_string()))
}

fn out_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_OUTPUT, format!("{}: {e}", dir.display())))
}

fn read_config<T: DeserializeOwned>(path: &Path, rec: &mut Recorder) -> Outcome<T> {
    rec.input(path);
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))
}

pub fn learn(args: &LearnArgs, rec: &mut Recorder) -> Outcome {
    rec.set("structures", args.structures.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    let (table, raw) = read_table(&args.train, Some(&args.labels), rec)?;
    let (codes, classes) = encode_labels(&raw.expect("label column requested"));
    if classes.len() < 2 {
        return Err(Failure::new(EXIT_LEARN, format!("need at least 2 classes, found {}", classes.len())));
    }
    let model = fit_edda(&table.data, &codes, &args.structures)
        .and_then(|m| m.with_variable_names(table.names.clone()))
        .and_then(|m| m.with_class_labels(classes))
        .map_err(at(EXIT_LEARN))?;
    write_file(&args.out, rec, |w| save_edda(w, &model))?;
    println!("structure={} bic={:?}", model.structure, model.bic);
    Ok(())
}

/// Test data reordered to `[model variables | extra columns by name]`.
fn aligned_test(model: &EddaModel, table: &DataTable) -> Outcome<(DMatrix<f64>, ColumnAlignment)> {
    let align = ColumnAlignment::new(&table.names, &model.variable_names).map_err(at(EXIT_INPUT))?;
    Ok((align.apply(&table.data), align))
}

fn component_labels(model: &EddaModel, h: usize) -> Vec<String> {
    let mut labels: Vec<String> = if model.class_labels.len() == model.k() {
        model.class_labels.clone()
    } else {
        (0..model.k()).map(|k| k.to_string()).collect()
    };
    labels.extend((1..=h).map(|j| format!("hidden{j}")));
    labels
}

fn write_assignments(path: &Path, rec: &mut Recorder, fit: &DamdaModel, labels: &[String]) -> Outcome {
    let resp = fit
        .responsibilities
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_FIT, "fitted model carries no responsibilities"))?;
    let (t, map) = (resp.matrix(), resp.map_labels());
    write_file(path, rec, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["row_id".to_owned(), "map_class".to_owned(), "max_posterior".to_owned()];
        header.extend(labels.iter().map(|l| format!("post_{l}")));
        csv.write_record(&header)?;
        for i in 0..t.nrows() {
            let row = t.row(i);
            let best = map[i];
            let mut rec = vec![i.to_string(), labels[best].clone(), format!("{:?}", row[best])];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    })
}

fn write_bic_table(path: &Path, rec: &mut Recorder, sel: &HSelection) -> Outcome {
    write_file(path, rec, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["H", "bic", "selected", "status"])?;
        for fit in &sel.fits {
            let (bic, status) = match &fit.outcome {
                Ok((_, bic)) => (format!("{bic:?}"), "ok".to_owned()),
                Err(e) => (String::new(), e.clone()),
            };
            let chosen = u8::from(fit.h == sel.best.h()).to_string();
            csv.write_record([fit.h.to_string(), bic, chosen, status])?;
        }
        csv.flush()?;
        Ok(())
    })
}

fn write_fitted_model(path: &Path, rec: &mut Recorder, fit: &DamdaModel, names: Vec<String>, labels: Vec<String>) -> Outcome {
    let file = DamdaModelFile::new(fit, names, labels).map_err(at(EXIT_FIT))?;
    write_file(path, rec, |w| write_json(w, &file))
}

pub fn discover(args: &DiscoverArgs, rec: &mut Recorder) -> Outcome {
    rec.seed = Some(args.seed);
    rec.set("h_range", format!("{:?}", args.h_range.0));
    let (table, _) = read_table(&args.test, args.labels.as_deref(), rec)?;
    let model = load_model(&args.model, &table.names, rec)?;
    let (y, align) = aligned_test(&model, &table)?;
    let em = EmConfig { seed: args.seed, ..EmConfig::default() };
    let sel = select_h(&y, &model, &args.h_range.0, &em).map_err(at(EXIT_FIT))?;
    out_dir(&args.out)?;
    let labels = component_labels(&model, sel.best.h());
    write_fitted_model(&args.out.join("model.json"), rec, &sel.best, align.names.clone(), labels.clone())?;
    write_assignments(&args.out.join("assignments.csv"), rec, &sel.best, &labels)?;
    write_bic_table(&args.out.join("bic.csv"), rec, &sel)?;
    println!("H={} bic={:?}", sel.best.h(), sel.best.bic);
    Ok(())
}

/// `seed_size` is a count or the string `"all"`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum SeedSize {
    Count(usize),
    Word(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelectConfig {
    seed_size: Option<SeedSize>,
    max_components: Option<usize>,
    h_range: Option<String>,
    max_steps: Option<usize>,
    seed: Option<u64>,
    max_iter: Option<usize>,
    rel_tol: Option<f64>,
}

impl SelectConfig {
    fn resolve(self, h_flag: Option<&HRange>, seed_flag: Option<u64>, rec: &mut Recorder) -> Outcome<VarSelConfig> {
        let mut cfg = VarSelConfig::default();
        match self.seed_size {
            Some(SeedSize::Count(n)) => cfg.seed_size = Some(n),
            Some(SeedSize::Word(w)) if w == "all" => cfg.seed_size = None,
            Some(SeedSize::Word(w)) => return Err(Failure::new(EXIT_INPUT, format!("seed_size: expected a count or \"all\", found \"{w}\""))),
            None => {}
        }
        cfg.max_components = self.max_components;
        if let Some(h) = self.h_range {
            cfg.h_range = crate::parse_h_range(&h).map_err(|e| Failure::new(EXIT_INPUT, e))?.0;
        }
        if let Some(h) = h_flag {
            rec.set("h_range", format!("{:?}", h.0));
            cfg.h_range = h.0.clone();
        }
        cfg.max_steps = self.max_steps.unwrap_or(cfg.max_steps);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        if let Some(s) = seed_flag {
            rec.set("seed", s);
            cfg.seed = s;
        }
        cfg.em = EmConfig {
            max_iter: self.max_iter.unwrap_or(cfg.em.max_iter),
            rel_tol: self.rel_tol.unwrap_or(cfg.em.rel_tol),
            seed: cfg.seed,
        };
        Ok(cfg)
    }
}

pub fn select(args: &SelectArgs, rec: &mut Recorder) -> Outcome {
    let file_cfg: SelectConfig = match &args.config {
        Some(path) => read_config(path, rec)?,
        None => SelectConfig::default(),
    };
    let cfg = file_cfg.resolve(args.h_range.as_ref(), args.seed, rec)?;
    rec.seed = Some(cfg.seed);
    let (table, _) = read_table(&args.test, args.labels.as_deref(), rec)?;
    let model = load_model(&args.model, &table.names, rec)?;
    aligned_test(&model, &table)?;
    let result = greedy_search(&model, &table.data, &table.names, &cfg).map_err(at(EXIT_FIT))?;
    out_dir(&args.out)?;
    write_file(&args.out.join("selection.json"), rec, |w| write_json(w, &result.report()))?;
    write_file(&args.out.join("selection.csv"), rec, |w| result.write_csv(w))?;
    let labels = component_labels(&model, result.h());
    write_fitted_model(&args.out.join("model.json"), rec, result.model(), result.selected_names(), labels.clone())?;
    write_assignments(&args.out.join("assignments.csv"), rec, result.model(), &labels)?;
    println!("H={} bic={:?} selected={}", result.h(), result.bic(), result.selected_names().join(";"));
    Ok(())
}

/// Scores one replicate of a scenario with every method.
fn run_replicate(base: &ScenarioConfig, replicate: usize, h_range: &[usize], with_selection: bool) -> damda::Result<Vec<MetricsRow>> {
    let cfg = ScenarioConfig { seed: base.seed.wrapping_add(replicate as u64), ..base.clone() };
    let world = generate_world(&cfg)?;
    let learned = fit_edda(&world.x_train, &world.compact_train_labels(), &CovStructure::ALL)?
        .with_variable_names(world.train_names())?;
    let truth = &world.labels_test;
    let em = EmConfig { seed: cfg.seed, ..EmConfig::default() };
    let mut rows = Vec::new();
    let mut push = |method: &str, pred: &[usize], h: usize| -> damda::Result<()> {
        rows.push(MetricsRow {
            replicate,
            scenario: cfg.scenario.clone(),
            method: method.to_owned(),
            ari: ari(truth, pred)?,
            error: matched_error(truth, pred)?,
            h_selected: h,
        });
        Ok(())
    };

    let align = ColumnAlignment::new(&world.names, &learned.variable_names)?;
    let y = align.apply(&world.y_test);
    let y_trained = y.columns(0, align.p()).into_owned();
    let edda: Vec<usize> = (0..y_trained.nrows())
        .map(|i| {
            let post = predict_map(&learned, &DVector::from_iterator(align.p(), y_trained.row(i).iter().copied()))?;
            Ok(post.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k))
        })
        .collect::<damda::Result<_>>()?;
    push("EDDA", &edda, 0)?;

    let labels_of = |m: &DamdaModel| m.responsibilities.as_ref().map(|t| t.map_labels()).unwrap_or_default();
    let amda = select_h(&y_trained, &learned, h_range, &em)?;
    push("AMDA", &labels_of(&amda.best), amda.best.h())?;
    let damda = select_h(&y, &learned, h_range, &em)?;
    push("D-AMDA", &labels_of(&damda.best), damda.best.h())?;
    if with_selection {
        let vs = VarSelConfig { h_range: h_range.to_vec(), em, seed: cfg.seed, ..VarSelConfig::default() };
        let res = greedy_search(&learned, &world.y_test, &world.names, &vs)?;
        push("varSel D-AMDA", &labels_of(res.model()), res.h())?;
    }
    Ok(rows)
}

pub fn simulate(args: &SimulateArgs, rec: &mut Recorder) -> Outcome {
    let mut cfg: ScenarioConfig = match &args.config {
        Some(path) => read_config(path, rec)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = args.seed {
        rec.set("seed", s);
        cfg.seed = s;
    }
    if args.runs > 0 {
        rec.set("runs", args.runs);
        rec.set("h_range", format!("{:?}", args.h_range.0));
        rec.set("select", args.select);
    }
    rec.seed = Some(cfg.seed);
    cfg.validate().map_err(at(EXIT_INPUT))?;
    let world = generate_world(&cfg).map_err(at(EXIT_INPUT))?;
    out_dir(&args.out)?;

    let train_labels: Vec<String> = world.labels_train.iter().map(|c| c.to_string()).collect();
    let test_labels: Vec<String> = world.labels_test.iter().map(|c| c.to_string()).collect();
    let train = DataTable::new(world.train_names(), world.x_train.clone()).map_err(at(EXIT_OUTPUT))?;
    let test = DataTable::new(world.names.clone(), world.y_test.clone()).map_err(at(EXIT_OUTPUT))?;
    write_file(&args.out.join("train.csv"), rec, |w| write_csv_table(w, &train, Some(("class", &train_labels))))?;
    write_file(&args.out.join("test.csv"), rec, |w| write_csv_table(w, &test, Some(("class", &test_labels))))?;
    write_file(&args.out.join("roles.json"), rec, |w| write_json(w, &world.roles_sidecar()))?;

    if args.runs == 0 {
        println!("train_rows={} test_rows={}", world.x_train.nrows(), world.y_test.nrows());
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, damda::Result<Vec<MetricsRow>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.clamp(1, args.runs) {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= args.runs {
                    break;
                }
                let out = run_replicate(&cfg, r, &args.h_range.0, args.select);
                results.lock().expect("worker panicked").push((r, out));
            });
        }
    });
    let mut results = results.into_inner().expect("worker panicked");
    results.sort_by_key(|(r, _)| *r);
    let mut rows = Vec::new();
    for (r, out) in results {
        rows.extend(out.map_err(|e| {
            let f = at(EXIT_FIT)(e);
            Failure::new(f.code, format!("replicate {r}: {}", f.message))
        })?);
    }
    write_file(&args.out.join("metrics.csv"), rec, |w| write_metrics_csv(w, &rows))?;
    for method in ["EDDA", "AMDA", "D-AMDA", "varSel D-AMDA"] {
        let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == method).collect();
        if !sel.is_empty() {
            let n = sel.len() as f64;
            let mean_ari = sel.iter().map(|r| r.ari).sum::<f64>() / n;
            let mean_err = sel.iter().map(|r| r.error).sum::<f64>() / n;
            println!("method={method} mean_ari={mean_ari:?} mean_error={mean_err:?}");
        }
    }
    Ok(())
}

/// Picks the label column of a CSV: the named one, else its only column,
/// else the first of `fallbacks` present.
fn read_labels(path: &Path, name: Option<&str>, fallbacks: &[&str], rec: &mut Recorder) -> Outcome<Vec<String>> {
    let reader = open(path, rec)?;
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let fail = |e: String| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display()));
    let header: Vec<String> = csv.headers().map_err(|e| fail(e.to_string()))?.iter().map(str::to_owned).collect();
    let col = match name {
        Some(n) => header.iter().position(|h| h == n),
        None if header.len() == 1 => Some(0),
        None => fallbacks.iter().find_map(|f| header.iter().position(|h| h == f)),
    }
    .ok_or_else(|| fail(format!("no label column (looked for {})", name.map_or_else(|| fallbacks.join(", "), str::to_owned))))?;
    csv.records()
        .map(|r| {
            let r = r.map_err(|e| fail(e.to_string()))?;
            let line = r.position().map_or(0, |p| p.line());
            r.get(col).map(str::to_owned).ok_or_else(|| fail(format!("line {line}: missing label")))
        })
        .collect()
}

pub fn evaluate(args: &EvaluateArgs, rec: &mut Recorder) -> Outcome {
    let truth = read_labels(&args.truth, args.labels.as_deref(), &["class", "label", "map_class"], rec)?;
    let pred = read_labels(&args.pred, None, &["map_class", "class", "label"], rec)?;
    if truth.len() != pred.len() {
        return Err(Failure::new(EXIT_INPUT, format!("{} true labels but {} predictions", truth.len(), pred.len())));
    }
    let (t, _) = encode_labels(&truth);
    let (p, _) = encode_labels(&pred);
    let a = ari(&t, &p).map_err(at(EXIT_INPUT))?;
    let e = matched_error(&t, &p).map_err(at(EXIT_INPUT))?;
    println!("ari={a:?} error={e:?}");
    Ok(())
}
