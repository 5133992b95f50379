//! Effect occurrence (EOS), effect fidelity (EFS) and content leakage (CLS)
//! verdicts with their gating, an oracle judge for the synthetic effects, an
//! HTTP client for an external judge, and distribution proxies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::PixelVideo;
use crate::data::{self, EffectSpec, Family, SceneSpec, PALETTE};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub eos: String,
    pub efs: String,
    pub cls: String,
}

/// Gated per-clip verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VfxConsVerdict {
    pub eos: bool,
    pub efs: bool,
    pub cls: bool,
    pub rationale: Rationale,
    pub score: f64,
}

impl VfxConsVerdict {
    /// Apply gating: no occurrence forces fidelity and leakage to false,
    /// no fidelity forces leakage to false. Skipped dimensions count as 0.
    pub fn gated(eos: bool, efs: bool, cls: bool, mut rationale: Rationale) -> Self {
        let efs_g = eos && efs;
        let cls_g = efs_g && cls;
        if !eos {
            rationale.efs = "skipped: no effect occurred".into();
            rationale.cls = "skipped: no effect occurred".into();
        } else if !efs_g {
            rationale.cls = "skipped: effect not faithful".into();
        }
        let score = score(eos, efs_g, cls_g).expect("gated by construction");
        VfxConsVerdict {
            eos,
            efs: efs_g,
            cls: cls_g,
            rationale,
            score,
        }
    }
}

/// Mean of three already-gated indicators.
pub fn score(eos: bool, efs: bool, cls: bool) -> Result<f64> {
    if efs && !eos {
        return Err(Error::Judge("EFS recorded as true while EOS is false".into()));
    }
    if cls && !efs {
        return Err(Error::Judge("CLS recorded as true while EFS is false".into()));
    }
    Ok((eos as u8 + efs as u8 + cls as u8) as f64 / 3.0)
}

/// Aggregate from per-dimension rates.
pub fn aggregate(eos: f64, efs: f64, cls: f64) -> f64 {
    (eos + efs + cls) / 3.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub n: usize,
    pub eos: f64,
    pub efs: f64,
    pub cls: f64,
    pub score: f64,
}

pub fn rates(verdicts: &[VfxConsVerdict]) -> Rates {
    let n = verdicts.len();
    if n == 0 {
        return Rates::default();
    }
    let mean = |f: &dyn Fn(&VfxConsVerdict) -> bool| verdicts.iter().filter(|v| f(v)).count() as f64 / n as f64;
    let (eos, efs, cls) = (mean(&|v| v.eos), mean(&|v| v.efs), mean(&|v| v.cls));
    Rates {
        n,
        eos,
        efs,
        cls,
        score: aggregate(eos, efs, cls),
    }
}

/// Ground truth of one evaluated clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub effect: EffectSpec,
    pub target: SceneSpec,
    pub reference: SceneSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Minimum relative error reduction of the best effect fit over the still scene.
    pub min_gain: f64,
    /// Relative parameter tolerance for fidelity.
    pub param_tol: f64,
    /// Minimum mean absolute change from the first frame.
    pub min_motion: f64,
    /// Pixels farther than this from every palette colour are ignored by CLS.
    pub color_radius: f64,
    /// Inclusive frame range inspected by CLS.
    pub cls_frames: (usize, usize),
    pub grid: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            min_gain: 0.3,
            param_tol: 0.3,
            min_motion: 0.02,
            color_radius: 0.7,
            cls_frames: (1, 3),
            grid: 81,
        }
    }
}

/// Best parameter of one family against a generated clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub family: Family,
    pub param: f64,
    pub error: f64,
    /// `1 - error / still_error`.
    pub gain: f64,
}

fn frame_error(gen: &PixelVideo, f: usize, frame: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for (i, px) in frame.iter().enumerate() {
        let (y, x) = (i / gen.width, i % gen.width);
        let g = gen.pixel(f, y, x);
        e += (0..3).map(|c| (g[c] - px[c]).powi(2)).sum::<f64>();
    }
    e
}

/// Mean squared error over frames `1..` against a rendered hypothesis.
fn hypothesis_error(gen: &PixelVideo, render: impl Fn(usize, f64) -> Vec<[f64; 3]>) -> f64 {
    let mut e = 0.0;
    for f in 1..gen.frames {
        e += frame_error(gen, f, &render(f, data::progress(f, gen.frames)));
    }
    e / ((gen.frames - 1).max(1) * gen.width * gen.height * 3) as f64
}

fn still_error(gen: &PixelVideo, scene: &SceneSpec) -> f64 {
    let still = data::still(scene);
    hypothesis_error(gen, |_, _| still.clone())
}

/// Fit the scalar parameter of `family` by grid search plus golden-section refinement.
pub fn fit_effect(gen: &PixelVideo, scene: &SceneSpec, pattern_seed: u64, family: Family, grid: usize) -> Fit {
    let (lo, hi) = family.param_range();
    let (a, b) = (0.5 * lo, 1.5 * hi);
    let err = |param: f64| {
        let e = EffectSpec { family, param, seed: pattern_seed };
        hypothesis_error(gen, |f, p| data::render_frame(&e, scene, f, p))
    };
    let n = grid.max(3);
    let step = (b - a) / (n - 1) as f64;
    let (mut best_p, mut best_e) = (a, f64::INFINITY);
    for i in 0..n {
        let p = a + step * i as f64;
        let e = err(p);
        if e < best_e {
            best_p = p;
            best_e = e;
        }
    }
    let (mut l, mut r) = ((best_p - step).max(a), (best_p + step).min(b));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..24 {
        let m1 = r - phi * (r - l);
        let m2 = l + phi * (r - l);
        if err(m1) <= err(m2) {
            r = m2;
        } else {
            l = m1;
        }
    }
    let mid = 0.5 * (l + r);
    let em = err(mid);
    if em < best_e {
        best_p = mid;
        best_e = em;
    }
    let s = still_error(gen, scene);
    Fit {
        family,
        param: best_p,
        error: best_e,
        gain: if s > 1e-12 { 1.0 - best_e / s } else { 0.0 },
    }
}

/// Mean absolute change of frames `1..` from frame 0.
pub fn motion(v: &PixelVideo) -> f64 {
    let n = v.frame_len();
    if v.frames < 2 {
        return 0.0;
    }
    let first = &v.data[..n];
    let total: f64 = (1..v.frames)
        .map(|f| {
            v.data[f * n..(f + 1) * n]
                .iter()
                .zip(first)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    total / ((v.frames - 1) * n) as f64
}

fn nearest_palette(px: &[f64]) -> (usize, f64) {
    PALETTE
        .iter()
        .enumerate()
        .map(|(i, c)| (i, (0..3).map(|k| (px[k] - c[k]).powi(2)).sum::<f64>().sqrt()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("palette is non-empty")
}

/// Palette histogram over the target subject region in the CLS frames,
/// excluding pixels that read as the target background.
pub fn subject_histogram(gen: &PixelVideo, target: &SceneSpec, cfg: &OracleConfig) -> [usize; 6] {
    let mut hist = [0usize; 6];
    let (f0, f1) = cfg.cls_frames;
    for f in f0..=f1.min(gen.frames - 1) {
        for y in 0..gen.height {
            for x in 0..gen.width {
                if !target.contains(x, y) {
                    continue;
                }
                let (j, d) = nearest_palette(gen.pixel(f, y, x));
                if d <= cfg.color_radius && j != target.background {
                    hist[j] += 1;
                }
            }
        }
    }
    hist
}

/// Oracle verdict with the fits behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub verdict: VfxConsVerdict,
    pub fits: Vec<Fit>,
    pub motion: f64,
    pub histogram: [usize; 6],
}

pub fn oracle_judge(reference: &PixelVideo, gen: &PixelVideo, truth: &Truth, cfg: &OracleConfig) -> Result<OracleReport> {
    let ext = [data::FRAMES, data::HEIGHT, data::WIDTH, data::CHANNELS];
    if gen.extents() != ext || reference.extents() != ext {
        return Err(Error::Extent(format!(
            "judge expects {ext:?}, got generated {:?} and reference {:?}",
            gen.extents(),
            reference.extents()
        )));
    }
    let mut rationale = Rationale::default();
    let mot = motion(gen);
    let fits: Vec<Fit> = Family::ALL
        .iter()
        .map(|&f| fit_effect(gen, &truth.target, truth.effect.seed, f, cfg.grid))
        .collect();
    let best = *fits
        .iter()
        .max_by(|a, b| a.gain.total_cmp(&b.gain))
        .expect("five families");
    let hist = subject_histogram(gen, &truth.target, cfg);

    let eos = if mot < cfg.min_motion {
        rationale.eos = format!("degenerate: motion {mot:.4} below {}", cfg.min_motion);
        false
    } else if best.gain < cfg.min_gain {
        rationale.eos = format!("best fit {} explains only {:.2} of the change", best.family, best.gain);
        false
    } else {
        rationale.eos = format!("{} fit gain {:.2}", best.family, best.gain);
        true
    };

    let truth_param = truth.effect.param;
    let rel = (best.param - truth_param).abs() / truth_param.abs().max(1e-12);
    let efs = best.family == truth.effect.family && rel <= cfg.param_tol;
    rationale.efs = format!(
        "detected {} {}={:.3} vs truth {} {:.3} (rel {:.2})",
        best.family,
        best.family.param_name(),
        best.param,
        truth.effect.family,
        truth_param,
        rel
    );

    let (arg, top) = hist
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .map(|(i, &c)| (i, c))
        .expect("six bins");
    let unique = hist.iter().filter(|&&c| c == top).count() == 1;
    let cls = top > 0 && unique && arg == truth.target.subject && arg != truth.reference.subject;
    rationale.cls = format!(
        "subject region reads {} ({top} px); target {}, reference {}",
        data::COLOR_NAMES[arg],
        data::COLOR_NAMES[truth.target.subject],
        data::COLOR_NAMES[truth.reference.subject]
    );

    Ok(OracleReport {
        verdict: VfxConsVerdict::gated(eos, efs, cls, rationale),
        fits,
        motion: mot,
        histogram: hist,
    })
}

/// Outcome of checking the oracle thresholds on rendered clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub n: usize,
    /// Fraction of ground-truth renders judged (true, true, true).
    pub truth_pass: f64,
    /// Fraction of wrong-family renders whose EFS is false.
    pub shuffled_efs_fail: f64,
}

/// Judge `n` ground-truth pairs and `n` renders of the target scene under a
/// different family than the recorded truth.
pub fn calibrate(n: usize, families: &[Family], seed: u64, cfg: &OracleConfig) -> Result<Calibration> {
    let mut pass = 0;
    let mut fail = 0;
    for i in 0..n {
        let fam = families[i % families.len()];
        let p = data::make_pair(fam, rng::derive(seed, i as u64));
        let truth = Truth {
            effect: p.effect,
            target: p.target.scene,
            reference: p.reference.scene,
        };
        let v = oracle_judge(&p.reference.video, &p.target.video, &truth, cfg)?.verdict;
        if v.eos && v.efs && v.cls {
            pass += 1;
        }
        let other = Family::ALL[(fam.index() as usize + 1 + i % 4) % Family::ALL.len()];
        let mut r = rng::derived(seed ^ 0x5A5A, i as u64);
        let wrong = EffectSpec::sample(other, &mut r);
        let wrong = EffectSpec { seed: p.effect.seed, ..wrong };
        let gen = data::render_video(&wrong, &p.target.scene);
        if !oracle_judge(&p.reference.video, &gen, &truth, cfg)?.verdict.efs {
            fail += 1;
        }
    }
    let d = n.max(1) as f64;
    Ok(Calibration {
        n,
        truth_pass: pass as f64 / d,
        shuffled_efs_fail: fail as f64 / d,
    })
}

/// Per-clip CSV rows plus summary rates.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<(String, VfxConsVerdict)>,
}

impl EvalReport {
    pub fn rates(&self) -> Rates {
        let v: Vec<VfxConsVerdict> = self.rows.iter().map(|r| r.1.clone()).collect();
        rates(&v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,eos,efs,cls,score,eos_note,efs_note,cls_note\n");
        let q = |t: &str| format!("\"{}\"", t.replace('"', "'"));
        for (id, v) in &self.rows {
            let _ = writeln!(
                s,
                "{id},{},{},{},{:.4},{},{},{}",
                v.eos as u8,
                v.efs as u8,
                v.cls as u8,
                v.score,
                q(&v.rationale.eos),
                q(&v.rationale.efs),
                q(&v.rationale.cls)
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let r = self.rates();
        format!(
            "clips = {}\neos = {:.4}\nefs = {:.4}\ncls = {:.4}\nvfx_cons = {:.4}\n",
            r.n, r.eos, r.efs, r.cls, r.score
        )
    }
}

// ---------------------------------------------------------------------------
// External judge over HTTP

pub const API_KEY_ENV: &str = "REFVFX_JUDGE_API_KEY";

/// Prompt texts sent with every request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub eos: String,
    pub efs: String,
    pub cls: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            eos: include_str!("../templates/eos.txt").into(),
            efs: include_str!("../templates/efs.txt").into(),
            cls: include_str!("../templates/cls.txt").into(),
        }
    }
}

/// Frames as row-major 8-bit RGB.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipPayload {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<Vec<u8>>,
}

impl ClipPayload {
    pub fn from_video(v: &PixelVideo) -> Self {
        let rgb = (0..v.frames)
            .map(|f| v.data[f * v.frame_len()..(f + 1) * v.frame_len()].iter().map(|&x| to_u8(x)).collect())
            .collect();
        ClipPayload {
            frames: v.frames,
            height: v.height,
            width: v.width,
            rgb,
        }
    }
}

/// `[-1, 1]` to `0..=255`.
pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Request body.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub templates: Templates,
    pub reference: ClipPayload,
    pub generated: ClipPayload,
}

/// One answered question.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeAnswer {
    pub answer: serde_json::Value,
    #[serde(default)]
    pub rationale: String,
}

/// Response body.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub eos: JudgeAnswer,
    pub efs: JudgeAnswer,
    pub cls: JudgeAnswer,
}

fn parse_bool(a: &JudgeAnswer, dim: &str) -> Result<bool> {
    match &a.answer {
        serde_json::Value::Bool(b) => Ok(*b),
        serde_json::Value::String(s) if s.eq_ignore_ascii_case("true") => Ok(true),
        serde_json::Value::String(s) if s.eq_ignore_ascii_case("false") => Ok(false),
        other => Err(Error::Judge(format!("{dim}: cannot read `{other}` as True/False"))),
    }
}

impl JudgeResponse {
    pub fn verdict(&self) -> Result<VfxConsVerdict> {
        let eos = parse_bool(&self.eos, "eos")?;
        let efs = parse_bool(&self.efs, "efs")?;
        let cls = parse_bool(&self.cls, "cls")?;
        Ok(VfxConsVerdict::gated(
            eos,
            efs,
            cls,
            Rationale {
                eos: self.eos.rationale.clone(),
                efs: self.efs.rationale.clone(),
                cls: self.cls.rationale.clone(),
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: String,
    pub attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
}

impl RemoteConfig {
    /// Endpoint given explicitly; key read from [`API_KEY_ENV`].
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self::new(endpoint, api_key))
    }

    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            attempts: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
            concurrency: 4,
            cache_dir: None,
        }
    }
}

/// Client for an external judge; answers are cached by content hash.
pub struct RemoteJudge {
    config: RemoteConfig,
    templates: Templates,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, VfxConsVerdict>>,
    requests: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl RemoteJudge {
    pub fn new(config: RemoteConfig, templates: Templates) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteJudge {
            config,
            templates,
            agent,
            cache: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn cache_key(&self, reference: &PixelVideo, gen: &PixelVideo) -> String {
        let mut h = Sha256::new();
        for v in [reference, gen] {
            for e in v.extents() {
                h.update((e as u64).to_le_bytes());
            }
            for x in &v.data {
                h.update(x.to_le_bytes());
            }
        }
        for t in [&self.templates.eos, &self.templates.efs, &self.templates.cls] {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn cached(&self, key: &str) -> Option<VfxConsVerdict> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let dir = self.config.cache_dir.as_ref()?;
        let text = std::fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
        let v: VfxConsVerdict = serde_json::from_str(&text).ok()?;
        self.cache.lock().expect("cache lock").insert(key.to_string(), v.clone());
        Some(v)
    }

    fn store(&self, key: &str, v: &VfxConsVerdict) -> Result<()> {
        self.cache.lock().expect("cache lock").insert(key.to_string(), v.clone());
        if let Some(dir) = &self.config.cache_dir {
            let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
            crate::manifest::write_atomic(&dir.join(format!("{key}.json")), text.as_bytes())?;
        }
        Ok(())
    }

    fn post_once(&self, body: &JudgeRequest) -> Result<JudgeResponse> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .send_json(body)
            .map_err(|e| Error::Judge(format!("request failed: {e}")))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Judge(format!("reading response: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Error::Judge(format!("malformed response: {e}")))
    }

    /// Judge one clip. Transport failures are retried with exponential
    /// backoff; a malformed answer is returned as an error immediately.
    pub fn judge(&self, reference: &PixelVideo, gen: &PixelVideo) -> Result<VfxConsVerdict> {
        let key = self.cache_key(reference, gen);
        if let Some(v) = self.cached(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(v);
        }
        let body = JudgeRequest {
            templates: self.templates.clone(),
            reference: ClipPayload::from_video(reference),
            generated: ClipPayload::from_video(gen),
        };
        let mut last = None;
        for attempt in 0..self.config.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
            }
            match self.post_once(&body) {
                Ok(resp) => {
                    let v = resp.verdict()?;
                    self.store(&key, &v)?;
                    return Ok(v);
                }
                Err(Error::Judge(msg)) if msg.starts_with("malformed") => return Err(Error::Judge(msg)),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Judge("no attempt made".into())))
    }

    /// Judge many clips with at most `concurrency` requests in flight.
    pub fn judge_all(&self, items: &[(&PixelVideo, &PixelVideo)]) -> Vec<Result<VfxConsVerdict>> {
        let workers = self.config.concurrency.max(1).min(items.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<VfxConsVerdict>>>> = items.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let r = self.judge(items[i].0, items[i].1);
                    *slots[i].lock().expect("slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot").expect("every slot filled"))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Distribution proxies

pub const PROXY_FEATURES: usize = 16;
const PROXY_SEED: u64 = 0xF00D_F1D0;
pub const COV_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProxyStats {
    /// Frechet distance between Gaussians fit to random-projection features.
    pub frechet_proxy: f64,
    /// Mean absolute inter-frame difference of each set.
    pub dynamics_a: f64,
    pub dynamics_b: f64,
    /// Diagonal loading added to both covariances.
    pub cov_eps: f64,
}

fn projection(len: usize) -> &'static DMatrix<f64> {
    static P: OnceLock<DMatrix<f64>> = OnceLock::new();
    let p = P.get_or_init(|| {
        let n = data::FRAMES * data::HEIGHT * data::WIDTH * data::CHANNELS;
        let mut r = rng::rng(PROXY_SEED);
        let s = 1.0 / (n as f64).sqrt();
        DMatrix::from_fn(PROXY_FEATURES, n, |_, _| {
            let z: f64 = StandardNormal.sample(&mut r);
            z * s
        })
    });
    assert_eq!(p.ncols(), len, "proxy features are defined for the dataset extents");
    p
}

/// Mean absolute difference between consecutive frames.
pub fn dynamics(v: &PixelVideo) -> f64 {
    let n = v.frame_len();
    if v.frames < 2 {
        return 0.0;
    }
    let s: f64 = (1..v.frames)
        .map(|f| (0..n).map(|i| (v.data[f * n + i] - v.data[(f - 1) * n + i]).abs()).sum::<f64>())
        .sum();
    s / ((v.frames - 1) * n) as f64
}

fn gaussian(set: &[PixelVideo]) -> (DVector<f64>, DMatrix<f64>) {
    let feats: Vec<DVector<f64>> = set
        .iter()
        .map(|v| projection(v.data.len()) * DVector::from_column_slice(&v.data))
        .collect();
    let k = PROXY_FEATURES;
    let mu = feats.iter().fold(DVector::zeros(k), |a, f| a + f) / set.len() as f64;
    let mut cov = DMatrix::zeros(k, k);
    for f in &feats {
        let d = f - &mu;
        cov += &d * d.transpose();
    }
    cov /= (set.len() - 1) as f64;
    for i in 0..k {
        cov[(i, i)] += COV_EPS;
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = nalgebra::SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

pub fn proxy_stats(a: &[PixelVideo], b: &[PixelVideo]) -> Result<ProxyStats> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Precondition("proxy statistics need at least two videos per set".into()));
    }
    let len = a[0].data.len();
    if a.iter().chain(b).any(|v| v.data.len() != len) {
        return Err(Error::Extent("all videos must share extents".into()));
    }
    let (ma, ca) = gaussian(a);
    let (mb, cb) = gaussian(b);
    let sa = sqrt_psd(&ca);
    let inner = sqrt_psd(&(&sa * &cb * &sa));
    let frechet = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * inner.trace();
    let mean = |s: &[PixelVideo]| s.iter().map(dynamics).sum::<f64>() / s.len() as f64;
    Ok(ProxyStats {
        frechet_proxy: frechet.max(0.0),
        dynamics_a: mean(a),
        dynamics_b: mean(b),
        cov_eps: COV_EPS,
    })
}

/// Mean-gap term of the proxy for two sets of constant videos.
pub fn mean_gap(a: &PixelVideo, b: &PixelVideo) -> f64 {
    let p = projection(a.data.len());
    let fa = p * DVector::from_column_slice(&a.data);
    let fb = p * DVector::from_column_slice(&b.data);
    (fa - fb).norm_squared()
}
