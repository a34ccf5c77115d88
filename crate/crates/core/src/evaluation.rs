//! Monte-Carlo block error rate estimation.
//!
//! Messages are simulated in batches until at least `min_errors` messages
//! were decoded wrongly or `max_trials` messages were simulated. With
//! several shards, each shard owns an rng seeded `seed + shard` and the
//! batches are consumed in a fixed round-robin order, so results depend only
//! on the seed, never on thread timing.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{derive_seed, rng_from_seed, Rng};
use crate::codec::{run_ipse, transmit_batch, MessageBatch, Noise, Snrs};
use crate::config::{EvalConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::networks::{Model, NormMode};
use crate::tensor::Scalar;

const Z95: f64 = 1.959963984540054;

/// Anything that can push a batch of messages through the channel and
/// return the decided bits.
pub trait BatchCodec: Sync {
    /// Bits per message.
    fn message_bits(&self) -> usize;
    /// Bits per block.
    fn block_bits(&self) -> usize;
    fn decode_batch(&self, messages: &MessageBatch, snrs: Snrs, rng: &mut Rng) -> Result<Vec<u8>>;
}

impl<S: Scalar> BatchCodec for Model<S> {
    fn message_bits(&self) -> usize {
        self.config.protocol.message_bits
    }

    fn block_bits(&self) -> usize {
        self.config.protocol.m
    }

    fn decode_batch(&self, messages: &MessageBatch, snrs: Snrs, rng: &mut Rng) -> Result<Vec<u8>> {
        self.check_frozen()?;
        let noise = Noise::sample(&self.config.protocol.layout(), messages.batch, rng);
        transmit_batch(self, messages, snrs, &noise)
    }
}

/// Synthetic codec that gets each message wrong independently with
/// probability `p` (by flipping its first bit).
#[derive(Clone, Copy, Debug)]
pub struct BernoulliOracle {
    pub p: f64,
    pub message_bits: usize,
    pub m: usize,
}

impl BatchCodec for BernoulliOracle {
    fn message_bits(&self) -> usize {
        self.message_bits
    }

    fn block_bits(&self) -> usize {
        self.m
    }

    fn decode_batch(&self, messages: &MessageBatch, _snrs: Snrs, rng: &mut Rng) -> Result<Vec<u8>> {
        use rand::Rng as _;
        let k = self.message_bits;
        let mut out = messages.bits.clone();
        for b in 0..messages.batch {
            if rng.random::<f64>() < self.p {
                out[b * k] ^= 1;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateOptions {
    pub min_errors: u64,
    pub max_trials: u64,
    pub messages_per_batch: usize,
    pub shards: usize,
    pub seed: u64,
}

impl EstimateOptions {
    pub fn from_config(eval: &EvalConfig, seed: u64) -> Self {
        EstimateOptions {
            min_errors: eval.min_errors,
            max_trials: eval.max_trials,
            messages_per_batch: eval.messages_per_batch,
            shards: eval.shards,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlerPoint {
    pub snr_ff_db: f64,
    pub snr_fb_db: f64,
    /// Messages simulated.
    pub trials: u64,
    /// Messages with at least one wrong bit.
    pub block_errors: u64,
    pub bler: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    /// Misclassified m-bit blocks over all blocks simulated.
    pub per_block_error_rate: f64,
    pub cap_hit: bool,
    /// Seconds spent; kept out of result files so they stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

impl BlerPoint {
    pub fn from_counts(snrs: Snrs, trials: u64, errors: u64, blocks: u64, block_symbol_errors: u64, cap_hit: bool) -> Self {
        let (lo, hi) = wilson_interval(errors, trials, Z95);
        BlerPoint {
            snr_ff_db: snrs.ff_db,
            snr_fb_db: snrs.fb_db,
            trials,
            block_errors: errors,
            bler: if trials == 0 { 0.0 } else { errors as f64 / trials as f64 },
            ci95_low: lo,
            ci95_high: hi,
            per_block_error_rate: if blocks == 0 { 0.0 } else { block_symbol_errors as f64 / blocks as f64 },
            cap_hit,
            wall_time: 0.0,
        }
    }

    /// `per_block_error_rate <= bler <= min(1, l * per_block_error_rate)`.
    pub fn check_invariant(&self, blocks_per_message: usize) -> Result<()> {
        let tol = 1e-12;
        let upper = (blocks_per_message as f64 * self.per_block_error_rate).min(1.0);
        if self.per_block_error_rate > self.bler + tol || self.bler > upper + tol || !(0.0..=1.0).contains(&self.bler) {
            return Err(Error::Numerical(format!(
                "inconsistent error rates: bler {} per-block {} with {} blocks",
                self.bler, self.per_block_error_rate, blocks_per_message
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    trials: u64,
    errors: u64,
    block_errors: u64,
}

fn count_errors(messages: &MessageBatch, decoded: &[u8], m: usize) -> Result<Counts> {
    let k = messages.message_bits;
    if decoded.len() != messages.bits.len() {
        return Err(Error::shape("decoded bits", messages.bits.len(), decoded.len()));
    }
    let mut c = Counts {
        trials: messages.batch as u64,
        ..Default::default()
    };
    for b in 0..messages.batch {
        let (truth, got) = (&messages.bits[b * k..(b + 1) * k], &decoded[b * k..(b + 1) * k]);
        let wrong_blocks = truth.chunks(m).zip(got.chunks(m)).filter(|(a, b)| a != b).count() as u64;
        c.block_errors += wrong_blocks;
        c.errors += u64::from(wrong_blocks > 0);
    }
    Ok(c)
}

fn run_batch<C: BatchCodec + ?Sized>(codec: &C, size: usize, snrs: Snrs, rng: &mut Rng) -> Result<Counts> {
    let messages = MessageBatch::random(size, codec.message_bits(), rng);
    let decoded = codec.decode_batch(&messages, snrs, rng)?;
    count_errors(&messages, &decoded, codec.block_bits())
}

/// Runs batches until the error target or the trial cap is reached.
pub fn estimate_bler<C: BatchCodec + ?Sized>(codec: &C, snrs: Snrs, opts: &EstimateOptions) -> Result<BlerPoint> {
    if opts.messages_per_batch == 0 || opts.shards == 0 {
        return Err(Error::InvalidArgument("messages_per_batch and shards must be >= 1".into()));
    }
    let start = Instant::now();
    let shards = opts.shards;
    let mut rngs: Vec<Rng> = (0..shards as u64).map(|k| rng_from_seed(opts.seed.wrapping_add(k))).collect();
    let mut total = Counts::default();
    let mut scheduled = 0u64;
    'outer: while total.errors < opts.min_errors && total.trials < opts.max_trials {
        let sizes: Vec<usize> = (0..shards)
            .map(|_| {
                let left = opts.max_trials.saturating_sub(scheduled);
                let s = (opts.messages_per_batch as u64).min(left) as usize;
                scheduled += s as u64;
                s
            })
            .collect();
        let results: Vec<Result<Counts>> = if shards == 1 {
            vec![run_batch(codec, sizes[0], snrs, &mut rngs[0])]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = rngs
                    .iter_mut()
                    .zip(&sizes)
                    .map(|(rng, &size)| {
                        scope.spawn(move || {
                            if size == 0 {
                                Ok(Counts::default())
                            } else {
                                run_batch(codec, size, snrs, rng)
                            }
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("shard panicked")).collect()
            })
        };
        for r in results {
            let c = r?;
            total.trials += c.trials;
            total.errors += c.errors;
            total.block_errors += c.block_errors;
            if total.errors >= opts.min_errors || total.trials >= opts.max_trials {
                break 'outer;
            }
        }
    }
    let blocks_per_message = codec.message_bits() / codec.block_bits();
    let mut point = BlerPoint::from_counts(
        snrs,
        total.trials,
        total.errors,
        total.trials * blocks_per_message as u64,
        total.block_errors,
        total.errors < opts.min_errors,
    );
    point.wall_time = start.elapsed().as_secs_f64();
    point.check_invariant(blocks_per_message)?;
    Ok(point)
}

/// Seed used for the point at `snrs`, independent across sweep points.
pub fn point_seed(seed: u64, snrs: Snrs) -> u64 {
    derive_seed(seed, &format!("bler-{}-{}", snrs.ff_db, snrs.fb_db))
}

/// Column order of result files.
pub const RESULT_COLUMNS: [&str; 11] = [
    "config_hash",
    "archive_hash",
    "snr_ff_db",
    "snr_fb_db",
    "trials",
    "block_errors",
    "bler",
    "ci95_low",
    "ci95_high",
    "per_block_error_rate",
    "cap_hit",
];

/// One row of a result file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub archive_hash: String,
    pub snr_ff_db: f64,
    pub snr_fb_db: f64,
    pub trials: u64,
    pub block_errors: u64,
    pub bler: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub per_block_error_rate: f64,
    pub cap_hit: bool,
}

impl ResultRow {
    pub fn new(config_hash: &str, archive_hash: &str, p: &BlerPoint) -> Self {
        ResultRow {
            config_hash: config_hash.to_string(),
            archive_hash: archive_hash.to_string(),
            snr_ff_db: p.snr_ff_db,
            snr_fb_db: p.snr_fb_db,
            trials: p.trials,
            block_errors: p.block_errors,
            bler: p.bler,
            ci95_low: p.ci95_low,
            ci95_high: p.ci95_high,
            per_block_error_rate: p.per_block_error_rate,
            cap_hit: p.cap_hit,
        }
    }

    pub fn point(&self) -> BlerPoint {
        BlerPoint {
            snr_ff_db: self.snr_ff_db,
            snr_fb_db: self.snr_fb_db,
            trials: self.trials,
            block_errors: self.block_errors,
            bler: self.bler,
            ci95_low: self.ci95_low,
            ci95_high: self.ci95_high,
            per_block_error_rate: self.per_block_error_rate,
            cap_hit: self.cap_hit,
            wall_time: 0.0,
        }
    }
}

/// Paired CSV and JSON-lines result files sharing a stem.
#[derive(Clone, Debug)]
pub struct ResultFiles {
    pub csv: PathBuf,
    pub jsonl: PathBuf,
}

impl ResultFiles {
    /// `stem.csv` and `stem.jsonl`; an explicit `.csv` extension is accepted.
    pub fn new(stem: &Path) -> Self {
        let base = if stem.extension().is_some_and(|e| e == "csv" || e == "jsonl") {
            stem.with_extension("")
        } else {
            stem.to_path_buf()
        };
        let with = |ext: &str| {
            let mut s = base.clone().into_os_string();
            s.push(ext);
            PathBuf::from(s)
        };
        ResultFiles {
            csv: with(".csv"),
            jsonl: with(".jsonl"),
        }
    }

    pub fn read(&self) -> Result<Vec<ResultRow>> {
        read_results(&self.csv)
    }

    /// Rewrites both files with `rows`.
    pub fn write(&self, rows: &[ResultRow]) -> Result<()> {
        if let Some(dir) = self.csv.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        if rows.is_empty() {
            w.write_record(RESULT_COLUMNS).map_err(|e| Error::io(&self.csv, e.into()))?;
        }
        let mut jsonl = String::new();
        for r in rows {
            w.serialize(r).map_err(|e| Error::io(&self.csv, e.into()))?;
            jsonl.push_str(&serde_json::to_string(r).expect("plain record"));
            jsonl.push('\n');
        }
        let bytes = w.into_inner().map_err(|e| Error::io(&self.csv, e.into_error()))?;
        fs::write(&self.csv, bytes).map_err(|e| Error::io(&self.csv, e))?;
        let mut f = fs::File::create(&self.jsonl).map_err(|e| Error::io(&self.jsonl, e))?;
        f.write_all(jsonl.as_bytes()).map_err(|e| Error::io(&self.jsonl, e))
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, e.into()),
        _ => Error::Parse {
            what: path.display().to_string(),
            reason: e.to_string(),
        },
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                what: path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Identifies the model behind a set of results.
#[derive(Clone, Debug, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub archive_hash: String,
}

/// One point per forward SNR. When `files` is given, each finished point is
/// written immediately and points already present for the same provenance
/// are reused, so an interrupted sweep picks up where it stopped.
pub fn sweep<C: BatchCodec + ?Sized>(
    codec: &C,
    snr_ff_list: &[f64],
    snr_fb_db: f64,
    opts: &EstimateOptions,
    provenance: &Provenance,
    files: Option<&ResultFiles>,
    mut on_point: impl FnMut(&BlerPoint, bool),
) -> Result<Vec<BlerPoint>> {
    let mut rows = match files {
        Some(f) if f.csv.exists() => f
            .read()?
            .into_iter()
            .filter(|r| r.config_hash == provenance.config_hash && r.archive_hash == provenance.archive_hash)
            .collect(),
        _ => Vec::new(),
    };
    let mut points = Vec::with_capacity(snr_ff_list.len());
    for &ff in snr_ff_list {
        let snrs = Snrs::new(ff, snr_fb_db);
        if let Some(r) = rows.iter().find(|r| r.snr_ff_db == ff && r.snr_fb_db == snr_fb_db) {
            let p = r.point();
            on_point(&p, true);
            points.push(p);
            continue;
        }
        let point_opts = EstimateOptions {
            seed: point_seed(opts.seed, snrs),
            ..*opts
        };
        let p = estimate_bler(codec, snrs, &point_opts)?;
        on_point(&p, false);
        rows.push(ResultRow::new(&provenance.config_hash, &provenance.archive_hash, &p));
        if let Some(f) = files {
            f.write(&rows)?;
        }
        points.push(p);
    }
    if let Some(f) = files {
        // Keep rows in the order of the requested list.
        let order: Vec<(u64, u64)> = points.iter().map(|p| (p.snr_ff_db.to_bits(), p.snr_fb_db.to_bits())).collect();
        let requested: BTreeSet<_> = order.iter().copied().collect();
        let mut sorted: Vec<ResultRow> = order
            .iter()
            .filter_map(|key| rows.iter().find(|r| (r.snr_ff_db.to_bits(), r.snr_fb_db.to_bits()) == *key).cloned())
            .collect();
        sorted.extend(rows.into_iter().filter(|r| !requested.contains(&(r.snr_ff_db.to_bits(), r.snr_fb_db.to_bits()))));
        f.write(&sorted)?;
    }
    Ok(points)
}

/// `true` when BLER does not increase with forward SNR, within the
/// overlap of the confidence intervals.
pub fn is_monotone(points: &[BlerPoint]) -> bool {
    let mut sorted: Vec<&BlerPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.snr_ff_db.total_cmp(&b.snr_ff_db));
    sorted.windows(2).all(|w| w[1].ci95_low <= w[0].ci95_high)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub snr_ff_db: f64,
    pub snr_fb_db: f64,
    pub bler_active: f64,
    pub bler_passive: f64,
    /// `bler_active / bler_passive`; 1 when both are zero.
    pub ratio: f64,
    /// `1 - ratio`.
    pub improvement: f64,
}

fn check_comparable(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<()> {
    let geometry = |c: &ExperimentConfig| (c.protocol.message_bits, c.protocol.m, c.protocol.l, c.protocol.rounds);
    if geometry(a) != geometry(b) {
        let (ga, gb) = (geometry(a), geometry(b));
        return Err(Error::InvalidArgument(format!(
            "protocol mismatch between archives: (K, m, l, T) = {ga:?} vs {gb:?}"
        )));
    }
    Ok(())
}

/// Side-by-side BLER of two models over the same SNR points and seeds.
pub fn compare_modes<S: Scalar>(
    active: &Model<S>,
    passive: &Model<S>,
    snrs: &[Snrs],
    opts: &EstimateOptions,
) -> Result<Vec<ComparisonRow>> {
    check_comparable(&active.config, &passive.config)?;
    snrs.iter()
        .map(|&s| {
            let o = EstimateOptions {
                seed: point_seed(opts.seed, s),
                ..*opts
            };
            let a = estimate_bler(active, s, &o)?;
            let p = estimate_bler(passive, s, &o)?;
            let ratio = match (a.bler, p.bler) {
                (x, y) if x == 0.0 && y == 0.0 => 1.0,
                (x, y) => x / y,
            };
            Ok(ComparisonRow {
                snr_ff_db: s.ff_db,
                snr_fb_db: s.fb_db,
                bler_active: a.bler,
                bler_passive: p.bler,
                ratio,
                improvement: 1.0 - ratio,
            })
        })
        .collect()
}

/// Average transmitted power per channel use.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerAudit {
    pub messages: usize,
    pub forward_power: f64,
    pub feedback_power: f64,
    /// Average power of each forward round.
    pub forward_by_round: Vec<f64>,
    pub feedback_by_round: Vec<f64>,
}

/// Measures transmitted power with frozen statistics over `messages`
/// random messages.
pub fn power_audit<S: Scalar>(model: &Model<S>, messages: usize, batch: usize, snrs: Snrs, seed: u64) -> Result<PowerAudit> {
    model.check_frozen()?;
    let proto = &model.config.protocol;
    let lay = proto.layout();
    let mut rng = rng_from_seed(derive_seed(seed, "power-audit"));
    let params = model.params.bind(false);
    let mut fwd = vec![(0.0, 0usize); proto.rounds];
    let mut fb = vec![(0.0, 0usize); proto.rounds.saturating_sub(1)];
    let mut done = 0;
    while done < messages {
        let size = batch.min(messages - done);
        let msgs = MessageBatch::random(size, proto.message_bits, &mut rng);
        let noise = Noise::sample(&lay, size, &mut rng);
        let ep = run_ipse(model, &params, &msgs, snrs, &noise, NormMode::Frozen)?;
        for (acc, v) in fwd.iter_mut().zip(&ep.forward).chain(fb.iter_mut().zip(&ep.feedback)) {
            acc.0 += v.value().data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            acc.1 += v.value().len();
        }
        done += size;
    }
    let avg = |v: &[(f64, usize)]| v.iter().map(|a| a.0).sum::<f64>() / v.iter().map(|a| a.1).sum::<usize>().max(1) as f64;
    Ok(PowerAudit {
        messages,
        forward_power: avg(&fwd),
        feedback_power: avg(&fb),
        forward_by_round: fwd.iter().map(|a| a.0 / a.1.max(1) as f64).collect(),
        feedback_by_round: fb.iter().map(|a| a.0 / a.1.max(1) as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Perfect;

    impl BatchCodec for Perfect {
        fn message_bits(&self) -> usize {
            12
        }
        fn block_bits(&self) -> usize {
            3
        }
        fn decode_batch(&self, messages: &MessageBatch, _: Snrs, _: &mut Rng) -> Result<Vec<u8>> {
            Ok(messages.bits.clone())
        }
    }

    fn opts(seed: u64) -> EstimateOptions {
        EstimateOptions {
            min_errors: 100,
            max_trials: 100_000_000,
            messages_per_batch: 10_000,
            shards: 1,
            seed,
        }
    }

    #[test]
    fn ratio_of_counts() {
        let p = BlerPoint::from_counts(Snrs::new(0.0, 20.0), 100_000, 100, 400_000, 100, false);
        assert_eq!(p.bler, 1e-3);
        assert!(p.ci95_low < 1e-3 && p.ci95_high > 1e-3);
    }

    #[test]
    fn wilson_reference_values() {
        // 5 of 100: the textbook Wilson interval is [0.0215, 0.1118].
        let (lo, hi) = wilson_interval(5, 100, Z95);
        assert!((lo - 0.02154).abs() < 1e-4, "{lo}");
        assert!((hi - 0.11175).abs() < 1e-4, "{hi}");
        assert_eq!(wilson_interval(0, 0, Z95), (0.0, 1.0));
    }

    #[test]
    fn perfect_decoder_hits_the_cap() {
        let o = EstimateOptions {
            max_trials: 25_000,
            ..opts(1)
        };
        let p = estimate_bler(&Perfect, Snrs::new(0.0, 20.0), &o).unwrap();
        assert_eq!((p.trials, p.block_errors, p.bler), (25_000, 0, 0.0));
        assert!(p.cap_hit);
    }

    #[test]
    fn oracle_stops_after_enough_errors() {
        let oracle = BernoulliOracle { p: 0.1, message_bits: 12, m: 3 };
        let p = estimate_bler(&oracle, Snrs::new(0.0, 20.0), &EstimateOptions { messages_per_batch: 100, ..opts(3) }).unwrap();
        assert!(p.block_errors >= 100 && !p.cap_hit);
        assert!(p.trials < 2000);
        assert!(p.bler > 0.05 && p.bler < 0.2);
        // One wrong block per wrong message.
        assert!((p.per_block_error_rate * 4.0 - p.bler).abs() < 1e-12);
    }

    #[test]
    fn shards_are_deterministic() {
        let oracle = BernoulliOracle { p: 0.01, message_bits: 12, m: 3 };
        let o = EstimateOptions { shards: 3, messages_per_batch: 2000, ..opts(9) };
        let a = estimate_bler(&oracle, Snrs::new(0.0, 20.0), &o).unwrap();
        let b = estimate_bler(&oracle, Snrs::new(0.0, 20.0), &o).unwrap();
        assert_eq!((a.trials, a.block_errors), (b.trials, b.block_errors));
    }

    #[test]
    fn invariant_rejects_impossible_rates() {
        let mut p = BlerPoint::from_counts(Snrs::new(0.0, 0.0), 100, 10, 400, 5, false);
        assert!(p.check_invariant(4).is_err());
        p.per_block_error_rate = 0.2;
        assert!(p.check_invariant(4).is_err());
        p.per_block_error_rate = 0.05;
        assert!(p.check_invariant(4).is_ok());
    }

    #[test]
    fn sweep_resumes_from_results() {
        let dir = tempfile::tempdir().unwrap();
        let files = ResultFiles::new(&dir.path().join("r"));
        let oracle = BernoulliOracle { p: 0.05, message_bits: 12, m: 3 };
        let prov = Provenance { config_hash: "c".into(), archive_hash: "a".into() };
        let o = EstimateOptions { messages_per_batch: 500, ..opts(4) };
        let first = sweep(&oracle, &[0.0, 1.0], 20.0, &o, &prov, Some(&files), |_, _| {}).unwrap();
        let mut reused = 0;
        let second = sweep(&oracle, &[0.0, 1.0, 2.0], 20.0, &o, &prov, Some(&files), |_, r| reused += usize::from(r)).unwrap();
        assert_eq!(reused, 2);
        let counts = |v: &[BlerPoint]| v.iter().map(|p| (p.trials, p.block_errors)).collect::<Vec<_>>();
        assert_eq!(counts(&first), counts(&second[..2]));
        let rows = files.read().unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(std::fs::read_to_string(&files.jsonl).unwrap().lines().count(), 3);
        let header = std::fs::read_to_string(&files.csv).unwrap();
        assert_eq!(header.lines().next().unwrap(), RESULT_COLUMNS.join(","));
        assert!(sweep(&oracle, &[], 20.0, &o, &prov, None, |_, _| {}).unwrap().is_empty());
    }
}
