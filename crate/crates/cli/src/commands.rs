//! The pipeline behind each subcommand. Every command returns an [`Outcome`]:
//! a JSON document, a human-readable rendering, and whether leaks were found.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ctmit::cache_abs::{analyze, AccessEvent, CacheConfig, Classification};
use ctmit::ir::{self, Module, ParamTy};
use ctmit::sensitivity::{detect_leaks, propagate_taint, LeakReport, LeakSite, LeakTotals};
use ctmit::sim::{
    check_constant_time, random_inputs, secret_bits, Compiled, CostModel, Inputs, LeakVerdict, Sampler, SimOptions,
    TimingTrace,
};
use ctmit::transform_branch::CtselMode;
use ctmit::transform_lut::{predict_original, predict_overhead, LutOptions, OriginalRange, OverheadPrediction, Strategy};
use ctmit::{corpus, Error, MitigateOptions, MitigationReport, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::table::Table;

pub const SCHEMA_VERSION: u32 = 1;

pub struct Outcome {
    pub json: Value,
    pub human: String,
    pub leaks: bool,
}

/// Settings shared by the pipeline commands. Defaults: 512 lines of 64
/// bytes, hit 1 / miss 100 cycles, first-iteration preloading with the
/// cache optimization, native `ctsel`, seed 0.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: String,
    pub cache: CacheConfig,
    pub cost: CostModel,
    pub strategy: Strategy,
    pub ctsel: CtselMode,
    pub optimize: bool,
    pub seed: u64,
    pub trials: Option<usize>,
    pub output: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.cache.check()?;
        if self.cost.hit == 0 {
            return Err(Error::Config("hit cost must be positive".into()));
        }
        self.cost.check()?;
        if self.trials == Some(0) {
            return Err(Error::Config("trials must be positive".into()));
        }
        Ok(())
    }

    fn sim(&self) -> SimOptions {
        SimOptions { cost: self.cost, cache: self.cache, ..Default::default() }
    }

    fn mitigate_options(&self) -> MitigateOptions {
        MitigateOptions {
            lut: LutOptions { strategy: self.strategy, optimize: self.optimize, cache: self.cache },
            ctsel: self.ctsel,
        }
    }
}

fn envelope(command: &str, body: impl Serialize) -> Value {
    let mut v = json!({ "schema": format!("ctmit.{command}"), "version": SCHEMA_VERSION });
    if let (Value::Object(out), Value::Object(b)) = (&mut v, serde_json::to_value(body).expect("serializable")) {
        out.extend(b);
    }
    v
}

/// Reads a program from a file, from stdin (`-`), or from the bundled
/// corpus (`corpus:NAME`).
pub fn load_input(spec: &str) -> Result<Module> {
    if let Some(name) = spec.strip_prefix("corpus:") {
        return corpus::load(name);
    }
    let src = if spec == "-" {
        std::io::read_to_string(std::io::stdin()).map_err(|e| Error::Input(format!("stdin: {e}")))?
    } else {
        std::fs::read_to_string(spec).map_err(|e| Error::Input(format!("{spec}: {e}")))?
    };
    ctmit::load_module(&src)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn site_name(l: &LeakSite) -> String {
    format!("{}#{}", l.block, l.index)
}

fn totals_table(function: &str, rows: &[(&str, &LeakTotals)]) -> String {
    let mut t = Table::new(["program", "function", "#IF", "sens", "#LUT", "sens", "#LUT-access", "sens"]);
    for (name, x) in rows {
        t.row([
            name.to_string(),
            function.to_string(),
            x.if_total.to_string(),
            x.if_sensitive.to_string(),
            x.lut_total.to_string(),
            x.lut_sensitive.to_string(),
            x.lut_access_total.to_string(),
            x.lut_access_sensitive.to_string(),
        ]);
    }
    t.render()
}

#[derive(Serialize)]
struct ClassifiedSite {
    #[serde(flatten)]
    site: LeakSite,
    class: Option<Classification>,
    /// Cache lines the access may touch.
    lines: usize,
}

#[derive(Serialize)]
struct Detection {
    function: String,
    totals: LeakTotals,
    conditionals: Vec<LeakSite>,
    lut_accesses: Vec<ClassifiedSite>,
}

fn detect(m: &Module, cache: &CacheConfig) -> (Detection, LeakReport) {
    let s = propagate_taint(m);
    let r = detect_leaks(m, &s);
    let f = m.entry_function().expect("validated module has an entry function");
    let a = analyze(m, f, cache);
    let lut_accesses = r
        .lut_accesses
        .iter()
        .map(|l| ClassifiedSite {
            site: l.clone(),
            class: a.class(&l.site()),
            lines: a.events.get(&l.site()).map_or(0, |e| e.candidates().len()),
        })
        .collect();
    let d = Detection { function: s.function.clone(), totals: r.totals.clone(), conditionals: r.conditionals.clone(), lut_accesses };
    (d, r)
}

/// Sensitive table accesses that may touch more than one line and are not
/// known to hit.
fn unresolved(m: &Module, cache: &CacheConfig) -> usize {
    let r = detect_leaks(m, &propagate_taint(m));
    let a = analyze(m, m.entry_function().expect("entry"), cache);
    r.lut_accesses
        .iter()
        .filter(|l| {
            a.class(&l.site()) != Some(Classification::MustHit)
                && matches!(a.events.get(&l.site()), Some(AccessEvent::Nondet(_)))
        })
        .count()
}

pub fn cmd_analyze(cfg: &PipelineConfig) -> Result<Outcome> {
    let m = ir::inline_all(&load_input(&cfg.input)?)?;
    let (d, r) = detect(&m, &cfg.cache);
    let mut human = totals_table(&d.function, &[(&cfg.input, &d.totals)]);
    if !r.is_empty() {
        let mut t = Table::new(["kind", "site", "array", "class", "lines"]);
        for c in &d.conditionals {
            t.row(["condbr".to_string(), site_name(c), "-".into(), "-".into(), "-".into()]);
        }
        for a in &d.lut_accesses {
            let kind = serde_json::to_value(a.site.kind).expect("kind").as_str().unwrap_or("").to_string();
            let class = a.class.map_or("-".to_string(), |c| format!("{c:?}"));
            t.row([kind, site_name(&a.site), a.site.array.clone().unwrap_or_default(), class, a.lines.to_string()]);
        }
        human.push('\n');
        human.push_str(&t.render());
    }
    let json = envelope("analyze", json!({ "program": cfg.input, "cache": cfg.cache, "detection": d }));
    Ok(Outcome { json, human, leaks: !r.is_empty() })
}

#[derive(Serialize)]
struct TablePrediction {
    table: String,
    /// Dynamic accesses per call (K), table bytes (N) and lines (M).
    k: u64,
    n: u64,
    m: u64,
    predicted: OverheadPrediction,
    original: OriginalRange,
}

fn table_bytes(m: &Module, name: &str) -> Option<u64> {
    if let Some(g) = name.strip_prefix('@') {
        return m.array(g).map(|a| a.byte_size());
    }
    let f = m.entry_function()?;
    match &f.param(name.strip_prefix('%')?)?.ty {
        ParamTy::Ptr(t, n) => Some(t.bytes() * n),
        _ => None,
    }
}

fn predictions(m: &Module, rep: &MitigationReport, cfg: &PipelineConfig) -> Vec<TablePrediction> {
    let mut k: BTreeMap<&str, u64> = BTreeMap::new();
    for a in &rep.tables.accesses {
        *k.entry(&a.table).or_default() += a.contexts;
    }
    k.into_iter()
        .filter_map(|(table, k)| {
            let n = table_bytes(m, table)?;
            Some(TablePrediction {
                table: table.to_string(),
                k,
                n,
                m: n.div_ceil(cfg.cache.line_size),
                predicted: predict_overhead(k, n, cfg.cache.line_size, cfg.strategy).ok()?,
                original: predict_original(k, n, cfg.cache.line_size).ok()?,
            })
        })
        .collect()
}

pub fn cmd_mitigate(cfg: &PipelineConfig) -> Result<(Outcome, String)> {
    let original = ir::inline_all(&load_input(&cfg.input)?)?;
    let (before, _) = detect(&original, &cfg.cache);
    let (out, rep) = ctmit::mitigate(&original, &cfg.mitigate_options())?;
    let (after, after_report) = detect(&out, &cfg.cache);
    let remaining = unresolved(&out, &cfg.cache);
    let tir = ir::print_module(&out);
    if let Some(path) = &cfg.output {
        std::fs::write(path, &tir).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    }
    let predicted = predictions(&original, &rep, cfg);

    let mut human = format!(
        "strategy {}, cache optimization {}, ctsel {}\n",
        cfg.strategy,
        if cfg.optimize { "on" } else { "off" },
        serde_json::to_value(cfg.ctsel).expect("mode").as_str().unwrap_or("")
    );
    human.push_str(&format!(
        "branches removed: {}; loops given a fixed trip count: {}; sweeps and preloads: {}; loops peeled: {}\n\n",
        rep.branches.mitigated.len(),
        rep.branches.loops_rewritten.len(),
        rep.tables.rewrites,
        rep.tables.peeled.len()
    ));
    if !rep.tables.accesses.is_empty() {
        let mut t = Table::new(["site", "table", "status", "lines", "contexts", "rewritten", "skipped"]);
        for a in &rep.tables.accesses {
            let status = serde_json::to_value(a.status).expect("status").as_str().unwrap_or("").to_string();
            t.row([
                format!("{}#{}", a.site.block, a.site.index),
                a.table.clone(),
                status,
                a.lines.to_string(),
                a.contexts.to_string(),
                a.rewritten_contexts.to_string(),
                a.skipped_contexts.to_string(),
            ]);
        }
        human.push_str(&t.render());
        human.push('\n');
    }
    if !predicted.is_empty() {
        let mut t = Table::new(["table", "K", "N", "M", "accesses", "misses", "hits", "original misses"]);
        for p in &predicted {
            t.row([
                p.table.clone(),
                p.k.to_string(),
                p.n.to_string(),
                p.m.to_string(),
                p.predicted.accesses.to_string(),
                p.predicted.misses.to_string(),
                p.predicted.hits.to_string(),
                format!("{}..={}", p.original.min_misses, p.original.max_misses),
            ]);
        }
        human.push_str(&t.render());
        human.push('\n');
    }
    human.push_str(&totals_table(&before.function, &[("before", &before.totals), ("after", &after.totals)]));
    human.push_str(&format!("unresolved sensitive accesses after repair: {remaining}\n"));

    let json = envelope(
        "mitigate",
        json!({
            "program": cfg.input,
            "options": {
                "strategy": cfg.strategy,
                "optimize": cfg.optimize,
                "ctsel": cfg.ctsel,
                "cache": cfg.cache,
            },
            "output": cfg.output,
            "report": rep,
            "predicted": predicted,
            "before": before.totals,
            "after": after.totals,
            "remaining_conditionals": after_report.conditionals.len(),
            "unresolved_lut_accesses": remaining,
        }),
    );
    Ok((Outcome { json, human, leaks: !after_report.conditionals.is_empty() || remaining > 0 }, tir))
}

#[derive(Serialize)]
struct RunSummary {
    cycles: u64,
    cpu_cycles: u64,
    hits: u64,
    misses: u64,
    ret: Option<u64>,
}

impl From<&TimingTrace> for RunSummary {
    fn from(t: &TimingTrace) -> Self {
        RunSummary { cycles: t.cycles, cpu_cycles: t.cpu_cycles, hits: t.hits, misses: t.misses, ret: t.ret }
    }
}

#[derive(Serialize)]
struct SimRow {
    inputs: Inputs,
    before: RunSummary,
    after: RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<(TimingTrace, TimingTrace)>,
}

/// Input vectors from a JSON file holding one object or a list of them.
fn input_vectors(path: &PathBuf) -> Result<Vec<Inputs>> {
    let v: Value = read_json(path)?;
    let list = match v {
        Value::Array(xs) => xs,
        other => vec![other],
    };
    list.into_iter()
        .map(|x| serde_json::from_value(x).map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn cmd_simulate(cfg: &PipelineConfig, inputs: Option<&PathBuf>, full_trace: bool) -> Result<Outcome> {
    let original = ir::inline_all(&load_input(&cfg.input)?)?;
    let (mitigated, _) = ctmit::mitigate(&original, &cfg.mitigate_options())?;
    let vectors = match inputs {
        Some(p) => input_vectors(p)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..cfg.trials.unwrap_or(2))
                .map(|_| {
                    let mut i = random_inputs(&original, &mut rng, false);
                    i.extend(random_inputs(&original, &mut rng, true));
                    i
                })
                .collect()
        }
    };
    let (a, b) = (Compiled::new(&original)?, Compiled::new(&mitigated)?);
    let opts = cfg.sim();
    let mut rows = Vec::new();
    for i in vectors {
        let (ta, tb) = (a.run(&i, &opts)?, b.run(&i, &opts)?);
        if ta.ret != tb.ret || ta.memory != tb.memory {
            return Err(Error::Transform {
                function: original.entry_function().map(|f| f.name.clone()).unwrap_or_default(),
                block: "-".into(),
                message: "mitigated program computes a different result".into(),
            });
        }
        rows.push(SimRow { before: (&ta).into(), after: (&tb).into(), trace: full_trace.then(|| (ta, tb)), inputs: i });
    }
    let mut t = Table::new(["input", "cycles before", "misses before", "cycles after", "misses after", "ret"]);
    for (k, r) in rows.iter().enumerate() {
        t.row([
            format!("in{}", k + 1),
            r.before.cycles.to_string(),
            r.before.misses.to_string(),
            r.after.cycles.to_string(),
            r.after.misses.to_string(),
            r.before.ret.map_or("-".into(), |v| v.to_string()),
        ]);
    }
    let json = envelope("simulate", json!({ "program": cfg.input, "cache": cfg.cache, "cost": cfg.cost, "runs": rows }));
    Ok(Outcome { json, human: t.render(), leaks: false })
}

fn sampler(m: &Module, cfg: &PipelineConfig, exhaustive: bool) -> Sampler {
    match cfg.trials {
        _ if exhaustive => Sampler::Exhaustive,
        Some(trials) => Sampler::Random { seed: cfg.seed, trials },
        None if secret_bits(m) <= 16 => Sampler::Exhaustive,
        None => Sampler::Random { seed: cfg.seed, trials: 1000 },
    }
}

/// Constant-time check of the program as given and, with `mitigated`, of
/// its repaired form. Leaks are judged on the last program checked.
pub fn cmd_check(cfg: &PipelineConfig, public: Option<&PathBuf>, exhaustive: bool, mitigated: bool) -> Result<Outcome> {
    let original = ir::inline_all(&load_input(&cfg.input)?)?;
    let public: Inputs = match public {
        Some(p) => read_json(p)?,
        None => random_inputs(&original, &mut ChaCha8Rng::seed_from_u64(cfg.seed), false),
    };
    let s = sampler(&original, cfg, exhaustive);
    let mut verdicts: Vec<(&str, LeakVerdict)> = vec![("original", check_constant_time(&original, &public, s, &cfg.sim())?)];
    if mitigated {
        let (out, _) = ctmit::mitigate(&original, &cfg.mitigate_options())?;
        verdicts.push(("mitigated", check_constant_time(&out, &public, s, &cfg.sim())?));
    }
    let mut t = Table::new(["program", "trials", "min cycles", "max cycles", "delta", "constant time", "same blocks", "same misses"]);
    for (name, v) in &verdicts {
        t.row([
            name.to_string(),
            v.trials.to_string(),
            v.min_cycles.to_string(),
            v.max_cycles.to_string(),
            v.max_cycle_delta.to_string(),
            v.constant_time.to_string(),
            v.same_block_trace.to_string(),
            v.same_site_misses.to_string(),
        ]);
    }
    let leaks = !verdicts.last().expect("one verdict").1.constant_time;
    let verdict_map: BTreeMap<&str, &LeakVerdict> = verdicts.iter().map(|(n, v)| (*n, v)).collect();
    let json = envelope(
        "check",
        json!({ "program": cfg.input, "sampler": s, "public": public, "cache": cfg.cache, "cost": cfg.cost, "verdicts": verdict_map }),
    );
    Ok(Outcome { json, human: t.render(), leaks })
}

pub fn cmd_predict(k: u64, n: u64, cls: u64) -> Result<Outcome> {
    let original = predict_original(k, n, cls)?;
    let mut rows = BTreeMap::new();
    let mut t = Table::new(["strategy", "accesses", "misses", "hits"]);
    t.row([
        "original".to_string(),
        original.accesses.to_string(),
        format!("{}..={}", original.min_misses, original.max_misses),
        format!("{}..={}", original.accesses - original.max_misses, original.accesses - original.min_misses),
    ]);
    for s in Strategy::ALL {
        let p = predict_overhead(k, n, cls, s)?;
        t.row([s.name().to_string(), p.accesses.to_string(), p.misses.to_string(), p.hits.to_string()]);
        rows.insert(s.name(), p);
    }
    let json = envelope("predict", json!({ "k": k, "n": n, "cls": cls, "lines": n.div_ceil(cls), "original": original, "strategies": rows }));
    Ok(Outcome { json, human: t.render(), leaks: false })
}

pub fn cmd_corpus_list() -> Result<Outcome> {
    let mut t = Table::new(["name", "secret bits", "description"]);
    let mut entries = Vec::new();
    for e in corpus::CORPUS {
        let bits = secret_bits(&corpus::load(e.name)?);
        t.row([e.name.to_string(), bits.to_string(), e.summary.to_string()]);
        entries.push(json!({ "name": e.name, "secret_bits": bits, "summary": e.summary }));
    }
    Ok(Outcome { json: envelope("corpus", json!({ "programs": entries })), human: t.render(), leaks: false })
}

pub fn cmd_corpus_show(name: &str) -> Result<String> {
    corpus::get(name).map(|e| e.source.to_string()).ok_or_else(|| Error::Input(format!("no corpus program named `{name}`")))
}
