//! Metrics report: collection from a finished world, CSV and summary
//! rendering, and the traffic-formula oracles.
//!
//! Output files and their column order:
//!
//! - `hops.csv`: `link_hops,messages`, one row per observed hop count.
//! - `channels.csv`: `class,sent,delivered,lost,discarded,delivery_rate`.
//! - `federations.csv`: `federation,style,messages,events,msg_per_event`.
//! - `latency.csv`: `style,count,mean_ms,p50_ms,p90_ms,p99_ms,max_ms`.
//! - `reach.csv`: `style,promotions,mean_reach`.
//! - `formulas.csv`: `federation,style,quantity,p,n,d_ms,t_renew_ms,
//!   t_heartbeat_ms,t_resubscription_ms,c,log,tolerance,expected,measured,pass`.
//! - `summary.txt`: a plain-text digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use super::config::{FormulaCheck, Quantity, SimConfig};
use crate::dispatcher::TrafficClass;
use crate::styles::{expected_traffic, LogBase, StyleKind, TrafficModel};
use crate::time::SimTime;
use crate::world::{ChannelCounts, World};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FedRow {
    pub name: String,
    pub style: Option<StyleKind>,
    pub messages: u64,
    pub events: u64,
}

impl FedRow {
    pub fn msg_per_event(&self) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            self.messages as f64 / self.events as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: SimTime,
    pub p90: SimTime,
    pub p99: SimTime,
    pub max: SimTime,
}

impl LatencyStats {
    pub fn of(samples: &[SimTime]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let pct = |p: usize| s[((s.len() - 1) * p) / 100];
        LatencyStats {
            count: s.len(),
            mean: s.iter().sum::<SimTime>() as f64 / s.len() as f64,
            p50: pct(50),
            p90: pct(90),
            p99: pct(99),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReachStats {
    pub promotions: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub check: FormulaCheck,
    pub style: Option<StyleKind>,
    pub expected: f64,
    pub measured: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub duration: SimTime,
    /// Published messages by number of inter-broker hops travelled.
    pub hop_histogram: BTreeMap<u32, u64>,
    /// Published messages with no intended receiver.
    pub zero_match_messages: u64,
    /// Of those, the ones that crossed a broker link anyway.
    pub zero_match_with_hops: u64,
    pub channels: BTreeMap<TrafficClass, ChannelCounts>,
    pub federations: Vec<FedRow>,
    pub latency: BTreeMap<StyleKind, LatencyStats>,
    pub reach: BTreeMap<StyleKind, ReachStats>,
    pub rejected_unauthorized: u64,
    pub commands: BTreeMap<String, u64>,
    pub command_errors: BTreeMap<String, u64>,
    pub broker_steps: u64,
    pub conjuncts_evaluated: u64,
    pub path_evaluations: u64,
    pub document_parses: u64,
    pub market_deliveries: u64,
    pub checks: Vec<CheckResult>,
}

fn reach_fraction(audience: usize, reached: usize) -> f64 {
    if audience == 0 {
        1.0
    } else {
        reached as f64 / audience as f64
    }
}

impl MetricsReport {
    pub fn collect(world: &World, config: &SimConfig) -> Self {
        let m = world.metrics();
        let mut report = MetricsReport {
            seed: config.seed,
            duration: config.duration,
            channels: m.channels.clone(),
            rejected_unauthorized: m.rejected_unauthorized,
            commands: m.commands.clone(),
            command_errors: m.command_errors.clone(),
            broker_steps: m.broker_steps,
            conjuncts_evaluated: m.match_stats.conjuncts_evaluated,
            path_evaluations: m.match_stats.path_evaluations,
            document_parses: m.match_stats.document_parses,
            market_deliveries: m.market_positive,
            ..MetricsReport::default()
        };
        for rec in m.hops.values() {
            *report.hop_histogram.entry(rec.link_hops).or_default() += 1;
            if rec.receivers == 0 {
                report.zero_match_messages += 1;
                if rec.link_hops > 0 {
                    report.zero_match_with_hops += 1;
                }
            }
        }
        report.federations = m
            .feds
            .values()
            .map(|f| FedRow {
                name: f.name.clone(),
                style: f.style,
                messages: f.messages,
                events: f.events,
            })
            .collect();
        report.federations.sort_by(|a, b| a.name.cmp(&b.name));
        for (style, samples) in &m.latencies {
            report.latency.insert(*style, LatencyStats::of(samples));
        }
        let mut reach: BTreeMap<StyleKind, (usize, f64)> = BTreeMap::new();
        for r in m.reach.values() {
            let Some(style) = r.fed.as_ref().and_then(|f| m.feds.get(f)).and_then(|f| f.style) else {
                continue;
            };
            if r.audience.is_empty() {
                continue;
            }
            let reached = r.audience.intersection(&r.reached).count();
            let slot = reach.entry(style).or_default();
            slot.0 += 1;
            slot.1 += reach_fraction(r.audience.len(), reached);
        }
        for (style, (n, sum)) in reach {
            report.reach.insert(
                style,
                ReachStats {
                    promotions: n,
                    mean: sum / n as f64,
                },
            );
        }
        report.checks = check_formulas(&report, &config.checks);
        report
    }

    pub fn federation(&self, name: &str) -> Option<&FedRow> {
        self.federations.iter().find(|f| f.name == name)
    }

    pub fn channel(&self, class: TrafficClass) -> ChannelCounts {
        self.channels.get(&class).copied().unwrap_or_default()
    }

    pub fn total_messages(&self) -> u64 {
        self.hop_histogram.values().sum()
    }

    /// Messages and events summed over the federations of one style.
    pub fn style_totals(&self, style: StyleKind) -> (u64, u64) {
        self.federations
            .iter()
            .filter(|f| f.style == Some(style))
            .fold((0, 0), |(m, e), f| (m + f.messages, e + f.events))
    }

    /// Every output file, in a fixed order.
    pub fn render(&self) -> Vec<(&'static str, String)> {
        vec![
            ("hops.csv", self.hops_csv()),
            ("channels.csv", self.channels_csv()),
            ("federations.csv", self.federations_csv()),
            ("latency.csv", self.latency_csv()),
            ("reach.csv", self.reach_csv()),
            ("formulas.csv", formulas_csv(&self.checks)),
            ("summary.txt", self.summary()),
        ]
    }

    fn hops_csv(&self) -> String {
        let mut out = String::from("link_hops,messages\n");
        for (h, n) in &self.hop_histogram {
            let _ = writeln!(out, "{h},{n}");
        }
        out
    }

    fn channels_csv(&self) -> String {
        let mut out = String::from("class,sent,delivered,lost,discarded,delivery_rate\n");
        for (class, c) in &self.channels {
            let rate = if c.sent == 0 { 1.0 } else { c.delivered as f64 / c.sent as f64 };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                class.as_str(),
                c.sent,
                c.delivered,
                c.lost,
                c.discarded,
                rate.min(1.0)
            );
        }
        out
    }

    fn federations_csv(&self) -> String {
        let mut out = String::from("federation,style,messages,events,msg_per_event\n");
        for f in &self.federations {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.2}",
                f.name,
                f.style.map_or("", StyleKind::as_str),
                f.messages,
                f.events,
                f.msg_per_event()
            );
        }
        out
    }

    fn latency_csv(&self) -> String {
        let mut out = String::from("style,count,mean_ms,p50_ms,p90_ms,p99_ms,max_ms\n");
        for (style, l) in &self.latency {
            let _ = writeln!(
                out,
                "{},{},{:.3},{},{},{},{}",
                style.as_str(),
                l.count,
                l.mean,
                l.p50,
                l.p90,
                l.p99,
                l.max
            );
        }
        out
    }

    fn reach_csv(&self) -> String {
        let mut out = String::from("style,promotions,mean_reach\n");
        for (style, r) in &self.reach {
            let _ = writeln!(out, "{},{},{:.6}", style.as_str(), r.promotions, r.mean);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed: {}", self.seed);
        let _ = writeln!(out, "simulated time: {}", crate::time::format_duration(self.duration));
        let total = self.total_messages();
        let _ = writeln!(out, "published messages: {total}");
        let share = if total == 0 {
            0.0
        } else {
            100.0 * self.zero_match_messages as f64 / total as f64
        };
        let _ = writeln!(
            out,
            "without any matching interest: {} ({share:.2}%), of which crossed a link: {}",
            self.zero_match_messages, self.zero_match_with_hops
        );
        let _ = writeln!(out, "rejected unauthorized elements: {}", self.rejected_unauthorized);
        let _ = writeln!(out, "marketplace deliveries: {}", self.market_deliveries);
        let _ = writeln!(out, "\nmatching work");
        let _ = writeln!(out, "  broker routing steps: {}", self.broker_steps);
        let _ = writeln!(out, "  document parses: {}", self.document_parses);
        let _ = writeln!(out, "  conjuncts evaluated: {}", self.conjuncts_evaluated);
        let _ = writeln!(out, "  path evaluations: {}", self.path_evaluations);
        if self.broker_steps > 0 {
            let _ = writeln!(
                out,
                "  per routing step: {:.3} parses, {:.3} conjuncts",
                self.document_parses as f64 / self.broker_steps as f64,
                self.conjuncts_evaluated as f64 / self.broker_steps as f64
            );
        }
        let _ = writeln!(out, "\nmessages per federation style");
        for style in StyleKind::ALL {
            let (m, e) = self.style_totals(style);
            if e > 0 || m > 0 {
                let ratio = if e == 0 { 0.0 } else { m as f64 / e as f64 };
                let _ = writeln!(out, "  {:<7} messages {m:>10}  events {e:>7}  msg/event {ratio:.2}", style.as_str());
            }
        }
        if !self.commands.is_empty() {
            let _ = writeln!(out, "\ncommands");
            for (k, v) in &self.commands {
                let _ = writeln!(out, "  {k}: {v}");
            }
        }
        if !self.command_errors.is_empty() {
            let _ = writeln!(out, "\ncommand errors");
            for (k, v) in &self.command_errors {
                let _ = writeln!(out, "  {k}: {v}");
            }
        }
        if !self.checks.is_empty() {
            let _ = writeln!(out, "\nformula checks");
            for c in &self.checks {
                let _ = writeln!(
                    out,
                    "  {} {} {}: measured {} expected {:.2} -> {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.check.federation,
                    c.check.quantity.as_str(),
                    c.measured,
                    c.expected,
                    if c.pass { "ok" } else { "out of tolerance" }
                );
            }
        }
        out
    }
}

fn model_of(c: &FormulaCheck) -> TrafficModel {
    TrafficModel {
        p: c.p,
        n: c.n,
        d: c.d,
        t_renew: c.t_renew,
        t_heartbeat: c.t_heartbeat,
        t_resubscription: c.t_resubscription,
        c: c.c,
        log: c.log,
    }
}

/// Expected value of a check's quantity for a federation of `style`.
pub fn expected_value(c: &FormulaCheck, style: StyleKind) -> f64 {
    let model = model_of(c);
    match c.quantity {
        Quantity::Promotion => expected_traffic(&model, style),
        Quantity::Heartbeat => model.gossip_heartbeats(),
        Quantity::Resubscription => model.gossip_resubscriptions(),
    }
}

fn within(measured: f64, expected: f64, tolerance: f64) -> bool {
    if tolerance == 0.0 {
        (measured - expected).abs() < 1e-9
    } else {
        (measured - expected).abs() <= tolerance * expected
    }
}

fn evaluate(check: &FormulaCheck, style: Option<StyleKind>, measured: Option<f64>) -> CheckResult {
    let expected = style.map_or(f64::NAN, |s| expected_value(check, s));
    let measured = measured.unwrap_or(f64::NAN);
    CheckResult {
        check: check.clone(),
        style,
        expected,
        measured,
        pass: style.is_some() && within(measured, expected, check.tolerance),
    }
}

/// Compares measured traffic against the formulas; failures are results,
/// not errors.
pub fn check_formulas(report: &MetricsReport, checks: &[FormulaCheck]) -> Vec<CheckResult> {
    checks
        .iter()
        .map(|c| {
            let fed = report.federation(&c.federation);
            let measured = match c.quantity {
                Quantity::Promotion => fed.map(|f| f.messages as f64),
                Quantity::Heartbeat => Some(report.channel(TrafficClass::Heartbeat).sent as f64),
                Quantity::Resubscription => Some(report.channel(TrafficClass::Resubscription).sent as f64),
            };
            evaluate(c, fed.and_then(|f| f.style), measured)
        })
        .collect()
}

fn formulas_csv(checks: &[CheckResult]) -> String {
    let mut out = String::from(
        "federation,style,quantity,p,n,d_ms,t_renew_ms,t_heartbeat_ms,t_resubscription_ms,c,log,tolerance,expected,measured,pass\n",
    );
    for r in checks {
        let c = &r.check;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{},{}",
            c.federation,
            r.style.map_or("", StyleKind::as_str),
            c.quantity.as_str(),
            c.p,
            c.n,
            c.d,
            c.t_renew,
            c.t_heartbeat,
            c.t_resubscription,
            c.c,
            c.log.as_str(),
            c.tolerance,
            r.expected,
            r.measured,
            r.pass
        );
    }
    out
}

/// Writes every report file into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in report.render() {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn read_rows(path: &Path) -> io::Result<Vec<BTreeMap<String, String>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(io::Error::other)?;
    let headers = rdr.headers().map_err(io::Error::other)?.clone();
    rdr.records()
        .map(|r| {
            let r = r.map_err(io::Error::other)?;
            Ok(headers.iter().map(str::to_owned).zip(r.iter().map(str::to_owned)).collect())
        })
        .collect()
}

fn field<T: std::str::FromStr>(row: &BTreeMap<String, String>, key: &str) -> io::Result<T> {
    row.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad or missing column `{key}`")))
}

/// Re-evaluates the formula checks of a written report from its CSV files.
pub fn check_report_dir(dir: &Path) -> io::Result<Vec<CheckResult>> {
    let feds = read_rows(&dir.join("federations.csv"))?;
    let channels = read_rows(&dir.join("channels.csv"))?;
    let sent = |class: &str| -> io::Result<Option<f64>> {
        channels
            .iter()
            .find(|r| r.get("class").map(String::as_str) == Some(class))
            .map(|r| field::<f64>(r, "sent"))
            .transpose()
    };
    let mut results = Vec::new();
    for row in read_rows(&dir.join("formulas.csv"))? {
        let check = FormulaCheck {
            federation: field(&row, "federation")?,
            quantity: field(&row, "quantity")?,
            p: field(&row, "p")?,
            n: field(&row, "n")?,
            d: field(&row, "d_ms")?,
            t_renew: field(&row, "t_renew_ms")?,
            t_heartbeat: field(&row, "t_heartbeat_ms")?,
            t_resubscription: field(&row, "t_resubscription_ms")?,
            c: field(&row, "c")?,
            log: field::<LogBase>(&row, "log")?,
            tolerance: field(&row, "tolerance")?,
        };
        let fed = feds
            .iter()
            .find(|r| r.get("federation") == Some(&check.federation));
        let style = fed.and_then(|r| r.get("style")).and_then(|s| s.parse::<StyleKind>().ok());
        let measured = match check.quantity {
            Quantity::Promotion => fed.map(|r| field::<f64>(r, "messages")).transpose()?,
            Quantity::Heartbeat => Some(sent("heartbeat")?.unwrap_or(0.0)),
            Quantity::Resubscription => Some(sent("resubscription")?.unwrap_or(0.0)),
        };
        results.push(evaluate(&check, style, measured));
    }
    Ok(results)
}
