use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use clap::{Args, ValueEnum};
use euigeo::cluster::{self, Locator, LocationMethod, TraceRecord};
use euigeo::corpus::{read_oui_registry, read_oui_vendors, CorpusBuilder, CorpusIndex, InputFormat};
use euigeo::fusion::{self, GeolocatedCpe};
use euigeo::mac::decode_eui64_with;
use euigeo::offset::{cdf_rows, filter_models, infer_all, ModelLine, OuiOffsetModel};
use euigeo::synth::{self, NoiseOptions, TopologyPlan, VendorProfile};
use euigeo::{geo, store, GeoPoint, Ipv6Address, Mac48, Oui};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::config::PipelineConfig;
use crate::{Failure, FailureExt, Format, GlobalArgs};

pub struct Context<'a> {
    pub global: &'a GlobalArgs,
    pub cfg: &'a PipelineConfig,
}

impl Context<'_> {
    fn out_dir(&self) -> Result<&Path, Failure> {
        let dir = self
            .global
            .out
            .as_deref()
            .ok_or_else(|| Failure::Config(anyhow!("--out DIR is required")))?;
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .input()?;
        Ok(dir)
    }

    fn format(&self, default: Format, allowed: &[Format]) -> Result<Format, Failure> {
        let f = self.global.format.unwrap_or(default);
        if !allowed.contains(&f) {
            let name = f.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
            return Err(Failure::Config(anyhow!("--format {name} is not supported here")));
        }
        Ok(f)
    }

    /// Prints a one-line JSON report headed by the effective config.
    fn emit(&self, command: &str, body: serde_json::Value) -> Result<(), Failure> {
        let mut report = serde_json::json!({ "command": command, "config": self.cfg.to_json() });
        if let (Some(r), serde_json::Value::Object(b)) = (report.as_object_mut(), body) {
            r.extend(b);
        }
        let mut out = io::stdout().lock();
        writeln!(out, "{report}").input()
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
        .input()
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .input()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.input()?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v = serde_json::from_str(t)
            .with_context(|| format!("{}:{}", path.display(), i + 1))
            .input()?;
        out.push(v);
    }
    Ok(out)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v).input()?;
    writeln!(w).input()?;
    w.flush().input()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    synth::write_jsonl(create(path)?, items).input()
}

pub fn decode(ctx: &Context, input: Option<&Path>) -> Result<(), Failure> {
    let reader: Box<dyn BufRead> = match input {
        None => Box::new(io::stdin().lock()),
        Some(p) if p == Path::new("-") => Box::new(io::stdin().lock()),
        Some(p) => Box::new(open(p)?),
    };
    let mut out = BufWriter::new(io::stdout().lock());
    let mut malformed = 0u64;
    for line in reader.lines() {
        let line = line.input()?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mac = match t.parse::<Ipv6Address>() {
            Ok(a) => decode_eui64_with(a, ctx.cfg.strict_ul),
            Err(_) => {
                malformed += 1;
                None
            }
        };
        match mac {
            Some(m) => writeln!(out, "{m}"),
            None => writeln!(out, "-"),
        }
        .input()?;
    }
    out.flush().input()?;
    if malformed > 0 {
        eprintln!("{}", serde_json::json!({ "level": "warn", "kind": "input", "malformed_lines": malformed }));
    }
    Ok(())
}

struct Loaded {
    index: CorpusIndex,
    summary: serde_json::Value,
}

fn load_corpus(ctx: &Context, registry: Option<&Path>, keep_multi_as: bool) -> Result<Loaded, Failure> {
    let g = ctx.global;
    let mut summary = serde_json::Map::new();
    let index = if let Some(p) = &g.index {
        if g.wan.is_some() || g.bssid.is_some() {
            return Err(Failure::Config(anyhow!("--index cannot be combined with --wan/--bssid")));
        }
        store::read_index(open(p)?)
            .with_context(|| format!("reading {}", p.display()))
            .input()?
    } else {
        if g.wan.is_none() && g.bssid.is_none() {
            return Err(Failure::Config(anyhow!("need --index or at least one of --wan/--bssid")));
        }
        let mut b = CorpusBuilder::new().dedupe(ctx.cfg.dedupe()).strict_ul(ctx.cfg.strict_ul);
        if let Some(p) = &g.wan {
            let s = b
                .ingest_wan_reader(open(p)?, InputFormat::from_path(p))
                .with_context(|| format!("reading {}", p.display()))
                .input()?;
            summary.insert("wan_ingest".into(), serde_json::to_value(s).unwrap());
        }
        if let Some(p) = &g.bssid {
            let s = b
                .ingest_bssid_reader(open(p)?, InputFormat::from_path(p))
                .with_context(|| format!("reading {}", p.display()))
                .input()?;
            summary.insert("bssid_ingest".into(), serde_json::to_value(s).unwrap());
        }
        let mut index = b.build();
        if !keep_multi_as {
            index = index.exclude_multi_as();
        }
        index
    };
    let index = match registry {
        Some(p) => {
            let reg = read_oui_registry(open(p)?)
                .with_context(|| format!("reading {}", p.display()))
                .input()?;
            index.canonicalize_ul(&reg)
        }
        None => index,
    };
    summary.insert("wan_macs".into(), index.wan_mac_count().into());
    summary.insert("bssids".into(), index.bssid_count().into());
    summary.insert("wan_ouis".into(), index.wan_by_oui.len().into());
    summary.insert("bssid_ouis".into(), index.bssid_by_oui.len().into());
    summary.insert("shared_ouis".into(), index.shared_ouis().count().into());
    summary.insert("multi_as_excluded".into(), index.multi_as_excluded.len().into());
    Ok(Loaded {
        index,
        summary: serde_json::Value::Object(summary),
    })
}

pub fn ingest(ctx: &Context, registry: Option<&Path>, keep_multi_as: bool) -> Result<(), Failure> {
    let dir = ctx.out_dir()?;
    let loaded = load_corpus(ctx, registry, keep_multi_as)?;
    let path = dir.join("index.egix");
    let mut w = create(&path)?;
    store::write_index(&loaded.index, &mut w).input()?;
    ctx.emit(
        "ingest",
        serde_json::json!({ "corpus": loaded.summary, "index": path.display().to_string() }),
    )
}

/// Inferred models before and after the confidence filter.
fn models_for(ctx: &Context, index: &CorpusIndex) -> (usize, Vec<OuiOffsetModel>) {
    let all = infer_all(index, &ctx.cfg.inference());
    let n = all.len();
    (n, filter_models(all, ctx.cfg.min_consistency))
}

fn write_cdf<T: std::fmt::Display>(path: &Path, header: &str, rows: &[(T, f64)]) -> Result<(), Failure> {
    let mut w = create(path)?;
    writeln!(w, "{header},cdf").input()?;
    for (v, c) in rows {
        writeln!(w, "{v},{c}").input()?;
    }
    w.flush().input()
}

pub fn infer(ctx: &Context, registry: Option<&Path>, keep_multi_as: bool) -> Result<(), Failure> {
    let format = ctx.format(Format::Jsonl, &[Format::Jsonl, Format::Csv])?;
    let dir = ctx.out_dir()?;
    let loaded = load_corpus(ctx, registry, keep_multi_as)?;
    let (inferred, models) = models_for(ctx, &loaded.index);
    let lines: Vec<ModelLine> = models.iter().map(ModelLine::from).collect();
    let models_path = match format {
        Format::Csv => {
            let p = dir.join("models.csv");
            let mut w = csv::Writer::from_writer(create(&p)?);
            w.write_record(["oui", "alloc", "offset", "confidence", "wan_count", "bssid_count", "alloc_consistency"])
                .input()?;
            for l in &lines {
                w.write_record([
                    l.oui.to_string(),
                    l.alloc.to_string(),
                    l.offset.to_string(),
                    l.confidence.to_string(),
                    l.wan_count.to_string(),
                    l.bssid_count.to_string(),
                    l.alloc_consistency.to_string(),
                ])
                .input()?;
            }
            w.flush().input()?;
            p
        }
        _ => {
            let p = dir.join("models.jsonl");
            write_jsonl(&p, &lines)?;
            p
        }
    };
    write_cdf(
        &dir.join("alloc_cdf.csv"),
        "alloc_size",
        &cdf_rows(models.iter().map(|m| m.alloc.alloc_size as i64).collect()),
    )?;
    write_cdf(&dir.join("offset_cdf.csv"), "offset", &cdf_rows(models.iter().map(|m| m.offset).collect()))?;
    ctx.emit(
        "infer",
        serde_json::json!({
            "corpus": loaded.summary,
            "models_inferred": inferred,
            "models_kept": models.len(),
            "excluded_low_confidence": inferred - models.len(),
            "models": models_path.display().to_string(),
        }),
    )
}

fn read_models(path: &Path) -> Result<Vec<OuiOffsetModel>, Failure> {
    read_jsonl::<ModelLine>(path)?
        .into_iter()
        .map(|l| OuiOffsetModel::try_from(l).map_err(|e| Failure::Input(anyhow!("{}: {e}", path.display()))))
        .collect()
}

pub fn fuse(ctx: &Context, registry: Option<&Path>, keep_multi_as: bool) -> Result<(), Failure> {
    let format = ctx.format(Format::Jsonl, &[Format::Jsonl, Format::Csv, Format::Geojson])?;
    let dir = ctx.out_dir()?;
    let loaded = load_corpus(ctx, registry, keep_multi_as)?;
    let models = match &ctx.global.models {
        Some(p) => read_models(p)?,
        None => models_for(ctx, &loaded.index).1,
    };
    let out = fusion::fuse(&loaded.index, &models);
    let path = match format {
        Format::Geojson => {
            let p = dir.join("cpe.geojson");
            write_json(&p, &fusion::to_geojson(&out.cpes))?;
            p
        }
        Format::Csv => {
            let p = dir.join("cpe.csv");
            let mut w = csv::Writer::from_writer(create(&p)?);
            for c in &out.cpes {
                w.serialize(c).input()?;
            }
            w.flush().input()?;
            p
        }
        Format::Jsonl => {
            let p = dir.join("cpe.jsonl");
            write_jsonl(&p, &out.cpes)?;
            p
        }
    };
    let stats = out.stats.to_json();
    write_json(&dir.join("fusion_stats.json"), &stats)?;
    ctx.emit(
        "fuse",
        serde_json::json!({
            "corpus": loaded.summary,
            "models": models.len(),
            "stats": stats,
            "cpe": path.display().to_string(),
        }),
    )
}

pub fn cluster(ctx: &Context, cpe: &Path, targets: Option<&Path>) -> Result<(), Failure> {
    let dir = ctx.out_dir()?;
    let traces_path = ctx
        .global
        .traces
        .as_deref()
        .ok_or_else(|| Failure::Config(anyhow!("--traces FILE is required")))?;
    let traces: Vec<TraceRecord> = read_jsonl(traces_path)?;
    let geos: Vec<GeolocatedCpe> = read_jsonl(cpe)?;
    let threshold = ctx.cfg.dispersion_threshold_km;
    let clusters = cluster::build_clusters(&traces, &geos, threshold);

    let located: BTreeSet<Ipv6Address> = geos.iter().map(|g| g.source_addr).collect();
    let targets: BTreeSet<Ipv6Address> = match targets {
        Some(p) => {
            let mut set = BTreeSet::new();
            for line in open(p)?.lines() {
                let line = line.input()?;
                let t = line.trim();
                if t.is_empty() || t.starts_with('#') {
                    continue;
                }
                set.insert(t.parse().with_context(|| format!("{}: `{t}`", p.display())).input()?);
            }
            set
        }
        None => traces.iter().map(|t| t.target).filter(|a| !located.contains(a)).collect(),
    };
    let locator = Locator::new(&clusters, &traces, ctx.cfg.prefix_len).with_prefix_support(&geos);
    let inferred: Vec<_> = targets.iter().filter_map(|t| locator.locate(*t)).collect();

    write_json(&dir.join("clusters.geojson"), &cluster::clusters_to_geojson(&clusters))?;
    write_json(&dir.join("clusters.json"), &cluster::clusters_summary(&clusters, threshold))?;
    write_jsonl(&dir.join("inferred.jsonl"), &inferred)?;

    let by_cluster = inferred.iter().filter(|l| l.method == LocationMethod::Cluster).count();
    let direct = located.len() as u64;
    let gain = cluster::coverage_gain(direct + inferred.len() as u64, direct).ok();
    ctx.emit(
        "cluster",
        serde_json::json!({
            "traces": traces.len(),
            "geolocated": direct,
            "clusters": clusters.len(),
            "dispersed": clusters.iter().filter(|c| c.dispersed).count(),
            "targets": targets.len(),
            "inferred": inferred.len(),
            "inferred_by_cluster": by_cluster,
            "inferred_by_prefix": inferred.len() - by_cluster,
            "coverage_gain": gain,
        }),
    )
}

fn bssid_locations(ctx: &Context, path: &Path) -> Result<BTreeMap<Mac48, GeoPoint>, Failure> {
    let mut b = CorpusBuilder::new().dedupe(ctx.cfg.dedupe());
    b.ingest_bssid_reader(open(path)?, InputFormat::from_path(path))
        .with_context(|| format!("reading {}", path.display()))
        .input()?;
    Ok(b.build()
        .bssid_by_oui
        .into_values()
        .flat_map(|s| s.entries.into_iter().map(|e| (e.bssid, e.location)))
        .collect())
}

pub fn compare(ctx: &Context, a: &Path, b: &Path) -> Result<(), Failure> {
    let format = ctx.format(Format::Jsonl, &[Format::Jsonl, Format::Csv])?;
    let report = geo::compare_sources(&bssid_locations(ctx, a)?, &bssid_locations(ctx, b)?);
    if let Some(dir) = ctx.global.out.as_ref().map(|_| ctx.out_dir()).transpose()? {
        match format {
            Format::Csv => {
                let mut w = create(&dir.join("compare.csv"))?;
                w.write_all(report.to_csv().as_bytes()).input()?;
                w.flush().input()?;
            }
            _ => write_json(&dir.join("compare.json"), &report.summary_json())?,
        }
    }
    ctx.emit("compare", serde_json::json!({ "report": report.summary_json() }))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Arris,
    Avm,
    /// Alternates Arris-style and AVM-style OUIs.
    Mixed,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Preset::Mixed)]
    pub preset: Preset,
    /// JSON file with `profiles` and optional `topology`; replaces the preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub devices: u32,
    #[arg(long, default_value_t = 1)]
    pub ouis: u32,
    #[arg(long, default_value_t = 1.0)]
    pub wan_prob: f64,
    #[arg(long, default_value_t = 1.0)]
    pub bssid_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    pub co_observation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eui64_fraction: f64,
    /// Routers in a metro topology; 0 scatters devices without traces.
    #[arg(long, default_value_t = 7)]
    pub routers: usize,
    #[arg(long, default_value_t = 8.0)]
    pub router_radius_km: f64,
    #[arg(long, default_value_t = 0)]
    pub random_iids: u64,
    #[arg(long, default_value_t = 0.0)]
    pub false_eui_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub multi_as_rate: f64,
}

#[derive(Deserialize)]
struct SynthSpec {
    profiles: Vec<VendorProfile>,
    #[serde(default)]
    topology: Option<TopologyPlan>,
}

fn preset_profiles(a: &SynthArgs) -> Vec<VendorProfile> {
    (0..a.ouis)
        .map(|i| {
            let arris = match a.preset {
                Preset::Arris => true,
                Preset::Avm => false,
                Preset::Mixed => i % 2 == 0,
            };
            let oui = match (a.ouis, arris) {
                (1, true) => Oui::new(0x001DD1),
                (1, false) => Oui::new(0x3810D5),
                _ => Oui::new(0x0C_1000 + i),
            };
            let mut p = if arris {
                VendorProfile::arris(oui, a.devices)
            } else {
                VendorProfile::avm(oui, a.devices)
            }
            .with_observation(a.wan_prob, a.bssid_prob, a.co_observation);
            p.eui64_fraction = a.eui64_fraction;
            p
        })
        .collect()
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> Result<(), Failure> {
    let dir = ctx.out_dir()?;
    let metro = || {
        if a.routers == 0 {
            TopologyPlan::default()
        } else {
            let indianapolis = GeoPoint { lat: 39.7684, lon: -86.1581 };
            TopologyPlan::metro(indianapolis, a.routers, 3.0 * a.router_radius_km, a.router_radius_km)
        }
    };
    let (profiles, topology) = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .input()?;
            let spec: SynthSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .config()?;
            let topo = spec.topology.unwrap_or_else(metro);
            (spec.profiles, topo)
        }
        None => (preset_profiles(a), metro()),
    };
    let (mut files, mut ledger) = synth::generate(&profiles, &topology, ctx.cfg.seed).config()?;
    let noise = NoiseOptions {
        random_iids: a.random_iids,
        false_eui_rate: a.false_eui_rate,
        multi_as_rate: a.multi_as_rate,
    };
    if !(0.0..=1.0).contains(&noise.false_eui_rate) || !(0.0..=1.0).contains(&noise.multi_as_rate) {
        return Err(Failure::Config(anyhow!("noise rates must lie in [0, 1]")));
    }
    let report = synth::inject_noise(&mut files, &mut ledger, &noise, ctx.cfg.seed);
    files.write_dir(&ledger, dir).input()?;
    ctx.emit(
        "synth",
        serde_json::json!({
            "profiles": ledger.profiles,
            "devices": ledger.devices.len(),
            "wan_lines": files.wan.len(),
            "bssid_lines": files.bssid.len(),
            "traces": files.traces.len(),
            "noise": report,
            "out": dir.display().to_string(),
        }),
    )
}

/// `key` rows sorted by count, the first `top` kept and the rest folded into
/// an `Other` row.
fn tabulate(counts: BTreeMap<String, u64>, top: usize) -> Vec<(String, u64)> {
    let mut rows: Vec<(String, u64)> = counts.into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if rows.len() > top {
        let rest: u64 = rows[top..].iter().map(|r| r.1).sum();
        rows.truncate(top);
        rows.push(("Other".to_string(), rest));
    }
    rows
}

pub fn report(ctx: &Context, cpe: &Path, countries: &Path, vendors: Option<&Path>, top: usize) -> Result<(), Failure> {
    let format = ctx.format(Format::Csv, &[Format::Csv, Format::Jsonl])?;
    let geos: Vec<GeolocatedCpe> = read_jsonl(cpe)?;
    let mut by_mac: BTreeMap<Mac48, String> = BTreeMap::new();
    let mut by_oui: BTreeMap<Oui, String> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(open(countries)?);
    for rec in rdr.records() {
        let rec = rec.input()?;
        let (Some(key), Some(country)) = (rec.get(0), rec.get(1)) else {
            continue;
        };
        let (key, country) = (key.trim(), country.trim().to_string());
        if let Ok(m) = key.parse::<Mac48>() {
            by_mac.insert(m, country);
        } else if let Ok(o) = key.parse::<Oui>() {
            by_oui.insert(o, country);
        }
    }
    let vendor_names = match vendors {
        Some(p) => read_oui_vendors(open(p)?).input()?,
        None => BTreeMap::new(),
    };

    let mut country_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut oui_counts: BTreeMap<String, u64> = BTreeMap::new();
    for g in &geos {
        let oui = g.wan_mac.oui();
        let country = by_mac
            .get(&g.wan_mac)
            .or_else(|| by_oui.get(&oui))
            .cloned()
            .unwrap_or_else(|| "Unknown".to_string());
        *country_counts.entry(country).or_default() += 1;
        let label = match vendor_names.get(&oui) {
            Some(v) => format!("{oui} {v}"),
            None => oui.to_string(),
        };
        *oui_counts.entry(label).or_default() += 1;
    }
    let total = geos.len() as u64;
    let share = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    let tables = [("country", tabulate(country_counts, top)), ("oui", tabulate(oui_counts, top))];

    match format {
        Format::Csv => {
            let mut out = io::stdout().lock();
            writeln!(out, "# config: {}", ctx.cfg.to_json()).input()?;
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["table", "key", "cpe", "share"]).input()?;
            for (name, rows) in &tables {
                for (k, n) in rows {
                    w.write_record([name.to_string(), k.clone(), n.to_string(), format!("{:.4}", share(*n))])
                        .input()?;
                }
            }
            w.flush().input()
        }
        _ => {
            let json_rows = |rows: &[(String, u64)]| -> Vec<serde_json::Value> {
                rows.iter()
                    .map(|(k, n)| serde_json::json!({ "key": k, "cpe": n, "share": share(*n) }))
                    .collect()
            };
            ctx.emit(
                "report",
                serde_json::json!({
                    "total_cpe": total,
                    "countries": json_rows(&tables[0].1),
                    "ouis": json_rows(&tables[1].1),
                }),
            )
        }
    }
}
