//! Image-level rate allocation: one coding point per image so the corpus
//! rate meets a target while mean quality is maximal.
//!
//! The search is a Lagrangian sweep for a feasible starting plan, greedy
//! upgrades that keep the budget, then a depth-first branch and bound whose
//! bound is the linear relaxation over each image's upper convex hull.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quality sums within this distance are treated as equal and resolved by the
/// tie-break (image order, then lower QP).
pub const QUALITY_TIE_TOLERANCE: f64 = 1e-9;
/// Slack allowed on the rate constraint.
pub const BUDGET_TOLERANCE: f64 = 1e-12;

pub const CANDIDATES_HEADER: &str = "# msgdn-candidates v1";
pub const PLAN_HEADER: &str = "# msgdn-plan v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub qp: i32,
    pub bits: u64,
    pub width: usize,
    pub height: usize,
    pub quality_db: f64,
}

impl Candidate {
    pub fn bpp(&self) -> f64 {
        self.bits as f64 / (self.width * self.height) as f64
    }

    fn pixels(&self) -> f64 {
        (self.width * self.height) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCandidates {
    pub image: String,
    /// Sorted by ascending QP.
    pub options: Vec<Candidate>,
}

/// Coding options for every image, sorted by image name.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    images: Vec<ImageCandidates>,
}

impl CandidateSet {
    pub fn new(mut images: Vec<ImageCandidates>) -> Result<Self> {
        images.sort_by(|a, b| a.image.cmp(&b.image));
        let mut seen = BTreeSet::new();
        for img in &mut images {
            if !seen.insert(img.image.clone()) {
                return Err(Error::config(format!("image `{}` listed twice", img.image)));
            }
            if img.options.is_empty() {
                return Err(Error::config(format!("image `{}` has no options", img.image)));
            }
            img.options.sort_by_key(|o| o.qp);
            if img.options.windows(2).any(|w| w[0].qp == w[1].qp) {
                return Err(Error::config(format!("image `{}` repeats a QP", img.image)));
            }
            let dims = (img.options[0].width, img.options[0].height);
            for o in &img.options {
                if o.bits == 0 || o.width == 0 || o.height == 0 || (o.width, o.height) != dims {
                    return Err(Error::config(format!(
                        "image `{}` qp {}: bits and consistent dimensions must be positive",
                        img.image, o.qp
                    )));
                }
                if !o.quality_db.is_finite() {
                    return Err(Error::NonFinite(format!("quality of `{}` qp {}", img.image, o.qp)));
                }
            }
        }
        if images.is_empty() {
            return Err(Error::config("candidate set is empty"));
        }
        let set = CandidateSet { images };
        for w in set.monotonicity_warnings() {
            log::warn!("{w}");
        }
        Ok(set)
    }

    pub fn images(&self) -> &[ImageCandidates] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images where spending more bits does not buy at least as much quality.
    pub fn monotonicity_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for img in &self.images {
            let mut by_bits: Vec<&Candidate> = img.options.iter().collect();
            by_bits.sort_by(|a, b| b.bits.cmp(&a.bits).then(a.qp.cmp(&b.qp)));
            for w in by_bits.windows(2) {
                if w[1].quality_db > w[0].quality_db {
                    out.push(format!(
                        "`{}`: qp {} has fewer bits than qp {} but higher quality",
                        img.image, w[1].qp, w[0].qp
                    ));
                }
            }
        }
        out
    }

    /// Reads the candidate CSV. Required columns: `image, qp, bits, width,
    /// height` and the named quality column.
    pub fn read_csv(path: &Path, quality_column: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, quality_column)
    }

    pub fn parse_csv(text: &str, quality_column: &str) -> Result<Self> {
        let err = |e: csv::Error| Error::parse("candidate CSV", e);
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(err)?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::parse("candidate CSV", format!("missing column `{name}`")))
        };
        let (ci, cq, cb, cw, ch, cy) = (col("image")?, col("qp")?, col("bits")?, col("width")?, col("height")?, col(quality_column)?);
        let mut images: Vec<ImageCandidates> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(err)?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| Error::parse("candidate CSV", format!("row {} is short", line + 1)))
            };
            let num = |i: usize| -> Result<f64> {
                field(i)?
                    .parse::<f64>()
                    .map_err(|e| Error::parse("candidate CSV", format!("row {}: {e}", line + 1)))
            };
            let int = |i: usize| -> Result<i64> {
                field(i)?
                    .parse::<i64>()
                    .map_err(|e| Error::parse("candidate CSV", format!("row {}: {e}", line + 1)))
            };
            let image = field(ci)?.to_string();
            let c = Candidate {
                qp: int(cq)? as i32,
                bits: int(cb)?.max(0) as u64,
                width: int(cw)?.max(0) as usize,
                height: int(ch)?.max(0) as usize,
                quality_db: num(cy)?,
            };
            match images.iter_mut().find(|i| i.image == image) {
                Some(entry) => entry.options.push(c),
                None => images.push(ImageCandidates { image, options: vec![c] }),
            }
        }
        Self::new(images)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "qp", "bits", "width", "height", "quality_db"]).unwrap();
        for img in &self.images {
            for o in &img.options {
                w.write_record([
                    img.image.clone(),
                    o.qp.to_string(),
                    o.bits.to_string(),
                    o.width.to_string(),
                    o.height.to_string(),
                    format!("{}", o.quality_db),
                ])
                .unwrap();
            }
        }
        format!("{CANDIDATES_HEADER}\n{}", String::from_utf8(w.into_inner().unwrap()).unwrap())
    }

    fn option(&self, image: usize, qp: i32) -> Option<&Candidate> {
        self.images[image].options.iter().find(|o| o.qp == qp)
    }
}

/// How the rate target is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Mean over images of per-image bpp.
    #[default]
    Mean,
    /// Total coded bits over total pixels.
    Total,
}

impl BudgetMode {
    pub fn name(self) -> &'static str {
        match self {
            BudgetMode::Mean => "mean",
            BudgetMode::Total => "total",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(BudgetMode::Mean),
            "total" => Ok(BudgetMode::Total),
            _ => Err(Error::parse("budget mode", format!("unknown `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub image: String,
    pub qp: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub target_bpp: f64,
    pub mode: BudgetMode,
    /// One entry per image, in image order.
    pub choices: Vec<Choice>,
    pub mean_bpp: f64,
    pub mean_quality_db: f64,
    /// Whether the branch and bound finished (the plan is then optimal).
    pub proven_optimal: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct AllocateOptions {
    pub mode: BudgetMode,
    /// Branch-and-bound node budget; past it the best plan found is returned.
    pub node_limit: u64,
}

impl Default for AllocateOptions {
    fn default() -> Self {
        AllocateOptions {
            mode: BudgetMode::Mean,
            node_limit: 5_000_000,
        }
    }
}

/// Rate of a plan under `mode`, in bpp.
pub fn plan_rate(plan: &AllocationPlan, cands: &CandidateSet, mode: BudgetMode) -> Result<f64> {
    let opts = resolve(plan, cands)?;
    Ok(rate_of(&opts, mode))
}

fn rate_of(opts: &[&Candidate], mode: BudgetMode) -> f64 {
    match mode {
        BudgetMode::Mean => opts.iter().map(|o| o.bpp()).sum::<f64>() / opts.len() as f64,
        BudgetMode::Total => {
            opts.iter().map(|o| o.bits as f64).sum::<f64>() / opts.iter().map(|o| o.pixels()).sum::<f64>()
        }
    }
}

fn resolve<'a>(plan: &AllocationPlan, cands: &'a CandidateSet) -> Result<Vec<&'a Candidate>> {
    if plan.choices.len() != cands.len() {
        return Err(Error::config(format!(
            "plan covers {} images, candidate set has {}",
            plan.choices.len(),
            cands.len()
        )));
    }
    plan.choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if cands.images[i].image != c.image {
                return Err(Error::config(format!("plan image `{}` out of order or unknown", c.image)));
            }
            cands
                .option(i, c.qp)
                .ok_or_else(|| Error::config(format!("`{}` has no qp {}", c.image, c.qp)))
        })
        .collect()
}

/// Mean over images of per-image bpp.
pub fn mean_bpp(plan: &AllocationPlan, cands: &CandidateSet) -> Result<f64> {
    plan_rate(plan, cands, BudgetMode::Mean)
}

/// Mean over images of the chosen quality.
pub fn mean_quality(plan: &AllocationPlan, cands: &CandidateSet) -> Result<f64> {
    let opts = resolve(plan, cands)?;
    Ok(opts.iter().map(|o| o.quality_db).sum::<f64>() / opts.len() as f64)
}

pub fn allocate(cands: &CandidateSet, target_bpp: f64) -> Result<AllocationPlan> {
    allocate_with(cands, target_bpp, AllocateOptions::default())
}

/// Per-image problem in knapsack form: `cost` sums to at most `budget`.
struct Problem {
    cost: Vec<Vec<f64>>,
    quality: Vec<Vec<f64>>,
    budget: f64,
}

impl Problem {
    fn new(cands: &CandidateSet, target: f64, mode: BudgetMode) -> Self {
        let n = cands.len() as f64;
        let total_pixels: f64 = cands.images.iter().map(|i| i.options[0].pixels()).sum();
        let cost = cands
            .images
            .iter()
            .map(|img| {
                img.options
                    .iter()
                    .map(|o| match mode {
                        BudgetMode::Mean => o.bpp(),
                        BudgetMode::Total => o.bits as f64,
                    })
                    .collect()
            })
            .collect();
        let quality = cands
            .images
            .iter()
            .map(|img| img.options.iter().map(|o| o.quality_db).collect())
            .collect();
        let budget = match mode {
            BudgetMode::Mean => target * n,
            BudgetMode::Total => target * total_pixels,
        };
        Problem { cost, quality, budget }
    }

    fn sums(&self, pick: &[usize]) -> (f64, f64) {
        pick.iter()
            .enumerate()
            .fold((0.0, 0.0), |(c, q), (i, &o)| (c + self.cost[i][o], q + self.quality[i][o]))
    }
}

/// Feasibility is judged on the reported rate so that the budget invariant
/// holds exactly as [`mean_bpp`] computes it.
fn feasible(cands: &CandidateSet, pick: &[usize], target: f64, mode: BudgetMode) -> bool {
    let opts: Vec<&Candidate> = pick.iter().enumerate().map(|(i, &o)| &cands.images[i].options[o]).collect();
    rate_of(&opts, mode) <= target + BUDGET_TOLERANCE
}

/// Whether plan `a` (quality `qa`) beats incumbent `b` (quality `qb`).
fn better(qa: f64, a: &[usize], qb: f64, b: &[usize]) -> bool {
    if qa > qb + QUALITY_TIE_TOLERANCE {
        return true;
    }
    if qa < qb - QUALITY_TIE_TOLERANCE {
        return false;
    }
    // options are in ascending QP order, so index order is QP order
    a < b
}

pub fn allocate_with(cands: &CandidateSet, target_bpp: f64, opts: AllocateOptions) -> Result<AllocationPlan> {
    if !(target_bpp > 0.0) || !target_bpp.is_finite() {
        return Err(Error::config(format!("target bpp must be positive, got {target_bpp}")));
    }
    let mode = opts.mode;
    let prob = Problem::new(cands, target_bpp, mode);
    let n = cands.len();

    let cheapest: Vec<usize> = (0..n)
        .map(|i| {
            let c = &prob.cost[i];
            let q = &prob.quality[i];
            (0..c.len())
                .min_by(|&a, &b| c[a].total_cmp(&c[b]).then(q[b].total_cmp(&q[a])).then(a.cmp(&b)))
                .unwrap()
        })
        .collect();
    if !feasible(cands, &cheapest, target_bpp, mode) {
        let opts: Vec<&Candidate> = cheapest.iter().enumerate().map(|(i, &o)| &cands.images[i].options[o]).collect();
        return Err(Error::Infeasible {
            min_bpp: rate_of(&opts, mode),
            target: target_bpp,
        });
    }

    let mut best = lagrangian(&prob, cands, target_bpp, mode, &cheapest);
    greedy_upgrade(&prob, cands, target_bpp, mode, &mut best);
    let proven = branch_and_bound(&prob, cands, target_bpp, mode, &mut best, opts.node_limit);
    if !proven {
        log::warn!("allocation search hit its node limit; plan may be sub-optimal");
    }

    let choices = best
        .iter()
        .enumerate()
        .map(|(i, &o)| Choice {
            image: cands.images[i].image.clone(),
            qp: cands.images[i].options[o].qp,
        })
        .collect();
    let mut plan = AllocationPlan {
        target_bpp,
        mode,
        choices,
        mean_bpp: 0.0,
        mean_quality_db: 0.0,
        proven_optimal: proven,
    };
    plan.mean_bpp = mean_bpp(&plan, cands)?;
    plan.mean_quality_db = mean_quality(&plan, cands)?;
    Ok(plan)
}

fn lagrangian(prob: &Problem, cands: &CandidateSet, target: f64, mode: BudgetMode, cheapest: &[usize]) -> Vec<usize> {
    let pick_at = |lambda: f64| -> Vec<usize> {
        (0..prob.cost.len())
            .map(|i| {
                let score = |o: usize| prob.quality[i][o] - lambda * prob.cost[i][o];
                (0..prob.cost[i].len())
                    .max_by(|&a, &b| {
                        score(a)
                            .total_cmp(&score(b))
                            .then(prob.cost[i][b].total_cmp(&prob.cost[i][a]))
                            .then(b.cmp(&a))
                    })
                    .unwrap()
            })
            .collect()
    };
    if feasible(cands, &pick_at(0.0), target, mode) {
        return pick_at(0.0);
    }
    let mut hi = 1.0;
    let mut best = cheapest.to_vec();
    for _ in 0..200 {
        let p = pick_at(hi);
        if feasible(cands, &p, target, mode) {
            best = p;
            break;
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let p = pick_at(mid);
        if feasible(cands, &p, target, mode) {
            hi = mid;
            best = p;
        } else {
            lo = mid;
        }
    }
    best
}

fn greedy_upgrade(prob: &Problem, cands: &CandidateSet, target: f64, mode: BudgetMode, pick: &mut [usize]) {
    loop {
        let (cost, _) = prob.sums(pick);
        let mut step: Option<(usize, usize, f64)> = None;
        for i in 0..pick.len() {
            for o in 0..prob.cost[i].len() {
                let dq = prob.quality[i][o] - prob.quality[i][pick[i]];
                if dq <= QUALITY_TIE_TOLERANCE {
                    continue;
                }
                let dc = prob.cost[i][o] - prob.cost[i][pick[i]];
                if cost + dc > prob.budget * (1.0 + 1e-9) + 1e-9 {
                    continue;
                }
                let old = pick[i];
                pick[i] = o;
                let ok = feasible(cands, pick, target, mode);
                pick[i] = old;
                if !ok {
                    continue;
                }
                let gain = if dc <= 0.0 { f64::INFINITY } else { dq / dc };
                if step.map_or(true, |(_, _, g)| gain > g) {
                    step = Some((i, o, gain));
                }
            }
        }
        match step {
            Some((i, o, _)) => pick[i] = o,
            None => return,
        }
    }
}

/// Upper convex hull of one image's options as incremental segments.
fn hull_segments(cost: &[f64], quality: &[f64]) -> (usize, Vec<(f64, f64)>) {
    let mut idx: Vec<usize> = (0..cost.len()).collect();
    idx.sort_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(quality[b].total_cmp(&quality[a])));
    let mut hull: Vec<usize> = Vec::new();
    for &i in &idx {
        if let Some(&last) = hull.last() {
            if quality[i] <= quality[last] {
                continue;
            }
            if cost[i] == cost[last] {
                continue;
            }
        }
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let s_ab = (quality[b] - quality[a]) / (cost[b] - cost[a]);
            let s_bi = (quality[i] - quality[b]) / (cost[i] - cost[b]);
            if s_bi >= s_ab {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let segs = hull
        .windows(2)
        .map(|w| (cost[w[1]] - cost[w[0]], quality[w[1]] - quality[w[0]]))
        .collect();
    (hull[0], segs)
}

/// Linear-relaxation bound on the quality of images `k..` for any budget,
/// precomputed per suffix.
struct SuffixBound {
    base_cost: f64,
    base_quality: f64,
    /// Segments by decreasing slope with cumulative (cost, quality).
    cum: Vec<(f64, f64, f64)>,
}

impl SuffixBound {
    fn bound(&self, budget: f64) -> f64 {
        let mut rem = budget - self.base_cost;
        if rem < -1e-9 * budget.abs().max(1.0) {
            return f64::NEG_INFINITY;
        }
        rem = rem.max(0.0);
        let pos = self.cum.partition_point(|&(c, _, _)| c <= rem);
        let (c0, q0) = if pos == 0 { (0.0, 0.0) } else { (self.cum[pos - 1].0, self.cum[pos - 1].1) };
        let extra = if pos < self.cum.len() { (rem - c0) * self.cum[pos].2 } else { 0.0 };
        self.base_quality + q0 + extra
    }
}

fn suffix_bounds(prob: &Problem) -> Vec<SuffixBound> {
    let n = prob.cost.len();
    let mut out = Vec::with_capacity(n + 1);
    let mut segs: Vec<(f64, f64)> = Vec::new();
    let (mut bc, mut bq) = (0.0, 0.0);
    out.push(SuffixBound {
        base_cost: 0.0,
        base_quality: 0.0,
        cum: Vec::new(),
    });
    for i in (0..n).rev() {
        let (start, s) = hull_segments(&prob.cost[i], &prob.quality[i]);
        bc += prob.cost[i][start];
        bq += prob.quality[i][start];
        segs.extend(s);
        segs.sort_by(|a, b| (b.1 / b.0).total_cmp(&(a.1 / a.0)));
        let mut cum = Vec::with_capacity(segs.len());
        let (mut c, mut q) = (0.0, 0.0);
        for &(dc, dq) in &segs {
            c += dc;
            q += dq;
            cum.push((c, q, dq / dc));
        }
        out.push(SuffixBound {
            base_cost: bc,
            base_quality: bq,
            cum,
        });
    }
    out.reverse();
    out
}

fn branch_and_bound(
    prob: &Problem,
    cands: &CandidateSet,
    target: f64,
    mode: BudgetMode,
    best: &mut Vec<usize>,
    node_limit: u64,
) -> bool {
    let n = prob.cost.len();
    let bounds = suffix_bounds(prob);
    let mut best_q = prob.sums(best).1;
    let mut pick = vec![0usize; n];
    let mut nodes = 0u64;
    // small slack so rounding in the bound never prunes an optimal branch
    let slack = 1e-9 * (1.0 + prob.budget.abs());

    struct Ctx<'a> {
        prob: &'a Problem,
        cands: &'a CandidateSet,
        bounds: &'a [SuffixBound],
        target: f64,
        mode: BudgetMode,
        slack: f64,
        node_limit: u64,
    }

    fn dfs(
        ctx: &Ctx,
        k: usize,
        cost: f64,
        quality: f64,
        pick: &mut Vec<usize>,
        best: &mut Vec<usize>,
        best_q: &mut f64,
        nodes: &mut u64,
    ) -> bool {
        *nodes += 1;
        if *nodes > ctx.node_limit {
            return false;
        }
        if k == pick.len() {
            if feasible(ctx.cands, pick, ctx.target, ctx.mode) && better(quality, pick, *best_q, best) {
                *best_q = quality;
                best.clone_from(pick);
            }
            return true;
        }
        let rem = ctx.prob.budget + ctx.slack - cost;
        if quality + ctx.bounds[k].bound(rem) + QUALITY_TIE_TOLERANCE < *best_q - QUALITY_TIE_TOLERANCE {
            return true;
        }
        for o in 0..ctx.prob.cost[k].len() {
            let c = cost + ctx.prob.cost[k][o];
            if c > ctx.prob.budget + ctx.slack {
                continue;
            }
            pick[k] = o;
            if !dfs(ctx, k + 1, c, quality + ctx.prob.quality[k][o], pick, best, best_q, nodes) {
                return false;
            }
        }
        true
    }

    let ctx = Ctx {
        prob,
        cands,
        bounds: &bounds,
        target,
        mode,
        slack,
        node_limit,
    };
    dfs(&ctx, 0, 0.0, 0.0, &mut pick, best, &mut best_q, &mut nodes)
}

impl AllocationPlan {
    /// CSV with one row per image; the first line records target and mode.
    pub fn to_csv(&self, cands: &CandidateSet) -> Result<String> {
        let opts = resolve(self, cands)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "qp", "bits", "width", "height", "bpp", "quality_db"]).unwrap();
        for (c, o) in self.choices.iter().zip(opts) {
            w.write_record([
                c.image.clone(),
                o.qp.to_string(),
                o.bits.to_string(),
                o.width.to_string(),
                o.height.to_string(),
                format!("{}", o.bpp()),
                format!("{}", o.quality_db),
            ])
            .unwrap();
        }
        Ok(format!(
            "{PLAN_HEADER} target_bpp={} budget={} optimal={}\n{}",
            self.target_bpp,
            self.mode.name(),
            self.proven_optimal,
            String::from_utf8(w.into_inner().unwrap()).unwrap()
        ))
    }

    pub fn save(&self, path: &Path, cands: &CandidateSet) -> Result<()> {
        std::fs::write(path, self.to_csv(cands)?).map_err(|e| Error::io(path, e))
    }

    /// Parses a plan CSV. Means are recomputed from the rows.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or("");
        let meta = first
            .strip_prefix(PLAN_HEADER)
            .ok_or_else(|| Error::parse("plan CSV", format!("missing `{PLAN_HEADER}` header")))?;
        let mut target = None;
        let mut mode = BudgetMode::Mean;
        let mut optimal = false;
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("target_bpp", v)) => target = v.parse::<f64>().ok(),
                Some(("budget", v)) => mode = BudgetMode::parse(v)?,
                Some(("optimal", v)) => optimal = v == "true",
                _ => {}
            }
        }
        let target_bpp = target.ok_or_else(|| Error::parse("plan CSV", "header lacks target_bpp"))?;
        let err = |e: csv::Error| Error::parse("plan CSV", e);
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut choices = Vec::new();
        let (mut sum_bpp, mut sum_q) = (0.0, 0.0);
        for rec in rdr.records() {
            let rec = rec.map_err(err)?;
            let get = |i: usize| rec.get(i).ok_or_else(|| Error::parse("plan CSV", "short row"));
            let f = |i: usize| -> Result<f64> { get(i)?.parse::<f64>().map_err(|e| Error::parse("plan CSV", e)) };
            choices.push(Choice {
                image: get(0)?.to_string(),
                qp: get(1)?.parse().map_err(|e| Error::parse("plan CSV", e))?,
            });
            sum_bpp += f(5)?;
            sum_q += f(6)?;
        }
        if choices.is_empty() {
            return Err(Error::parse("plan CSV", "no rows"));
        }
        let n = choices.len() as f64;
        Ok(AllocationPlan {
            target_bpp,
            mode,
            choices,
            mean_bpp: sum_bpp / n,
            mean_quality_db: sum_q / n,
            proven_optimal: optimal,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(qp: i32, bits: u64, quality_db: f64) -> Candidate {
        Candidate {
            qp,
            bits,
            width: 200,
            height: 120,
            quality_db,
        }
    }

    fn set(rows: &[(&str, Vec<Candidate>)]) -> CandidateSet {
        CandidateSet::new(
            rows.iter()
                .map(|(n, o)| ImageCandidates {
                    image: n.to_string(),
                    options: o.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_option_plan() {
        let c = set(&[("a", vec![opt(37, 3600, 30.0)]), ("b", vec![opt(38, 3600, 31.0)])]);
        let p = allocate(&c, 0.15).unwrap();
        assert!((p.mean_bpp - 0.15).abs() < 1e-15);
        assert_eq!(p.mean_quality_db, 30.5);
        assert!(p.proven_optimal);
    }

    #[test]
    fn mean_arithmetic() {
        let c = set(&[("a", vec![opt(37, 2400, 30.0)]), ("b", vec![opt(37, 4800, 32.0)])]);
        let p = allocate(&c, 1.0).unwrap();
        assert!((mean_bpp(&p, &c).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(mean_quality(&p, &c).unwrap(), 31.0);
    }

    #[test]
    fn infeasible_reports_minimum() {
        let c = set(&[("a", vec![opt(37, 4800, 30.0), opt(39, 3600, 29.0)])]);
        match allocate(&c, 0.1) {
            Err(Error::Infeasible { min_bpp, target }) => {
                assert!((min_bpp - 0.15).abs() < 1e-15);
                assert_eq!(target, 0.1);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(allocate(&c, 0.0).is_err());
    }

    #[test]
    fn hand_made_three_by_three() {
        // per image: (qp, bits, quality); pixels 24000 so bpp = bits / 24000
        let c = set(&[
            ("a", vec![opt(37, 6000, 33.0), opt(38, 4800, 32.4), opt(39, 3600, 31.5)]),
            ("b", vec![opt(37, 3000, 35.0), opt(38, 2400, 34.8), opt(39, 2000, 34.0)]),
            ("c", vec![opt(37, 9000, 30.0), opt(38, 6000, 29.0), opt(39, 4000, 27.0)]),
        ]);
        // budget 0.2 mean bpp is 14400 bits in total. Listing the feasible
        // plans by quality: 37/38/38 uses exactly 14400 bits for 96.8 dB,
        // 38/37/38 uses 13800 for 96.4, 38/38/38 uses 13200 for 96.2.
        let p = allocate(&c, 0.2).unwrap();
        let qps: Vec<i32> = p.choices.iter().map(|c| c.qp).collect();
        assert_eq!(qps, vec![37, 38, 38]);
        assert!((p.mean_quality_db - 96.8 / 3.0).abs() < 1e-12);
        assert!(p.mean_bpp <= 0.2 + BUDGET_TOLERANCE);
    }

    #[test]
    fn ties_prefer_lower_qp_in_image_order() {
        let c = set(&[
            ("a", vec![opt(37, 3600, 30.0), opt(38, 3600, 30.0)]),
            ("b", vec![opt(37, 3600, 30.0), opt(38, 2400, 30.0)]),
        ]);
        let p = allocate(&c, 0.15).unwrap();
        assert_eq!(p.choices.iter().map(|c| c.qp).collect::<Vec<_>>(), vec![37, 37]);
    }

    #[test]
    fn total_mode_weights_by_pixels() {
        let big = |qp, bits, q| Candidate {
            qp,
            bits,
            width: 400,
            height: 240,
            quality_db: q,
        };
        let c = set(&[
            ("a", vec![opt(37, 7200, 40.0), opt(39, 2400, 30.0)]),
            ("b", vec![big(37, 28800, 45.0), big(39, 9600, 30.0)]),
        ]);
        let mode = AllocateOptions {
            mode: BudgetMode::Total,
            ..Default::default()
        };
        // 39/37 costs 0.26 bpp over all pixels but only 0.2 as a mean of images
        let p = allocate_with(&c, 0.21, mode).unwrap();
        assert_eq!(p.choices.iter().map(|c| c.qp).collect::<Vec<_>>(), vec![37, 39]);
        assert!(plan_rate(&p, &c, BudgetMode::Total).unwrap() <= 0.21);
        let pm = allocate(&c, 0.21).unwrap();
        assert_eq!(pm.choices.iter().map(|c| c.qp).collect::<Vec<_>>(), vec![39, 37]);
        assert!(pm.mean_bpp <= 0.21);
    }

    #[test]
    fn csv_round_trips() {
        let c = set(&[
            ("b.png", vec![opt(37, 6000, 33.25), opt(38, 4800, 32.5)]),
            ("a.png", vec![opt(37, 3000, 35.0), opt(39, 2000, 34.0)]),
        ]);
        let text = c.to_csv();
        assert!(text.starts_with(CANDIDATES_HEADER));
        assert_eq!(CandidateSet::parse_csv(&text, "quality_db").unwrap(), c);
        assert!(CandidateSet::parse_csv(&text, "post_quality_db").is_err());

        let p = allocate(&c, 0.2).unwrap();
        let back = AllocationPlan::parse_csv(&p.to_csv(&c).unwrap()).unwrap();
        assert_eq!(back.choices, p.choices);
        assert_eq!(back.mode, p.mode);
        assert!((back.mean_bpp - p.mean_bpp).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_is_a_warning_only() {
        let c = set(&[("a", vec![opt(37, 6000, 30.0), opt(38, 4800, 31.0)])]);
        assert_eq!(c.monotonicity_warnings().len(), 1);
    }

    #[test]
    fn malformed_sets() {
        assert!(CandidateSet::new(vec![]).is_err());
        assert!(CandidateSet::new(vec![ImageCandidates {
            image: "a".into(),
            options: vec![]
        }])
        .is_err());
        assert!(CandidateSet::new(vec![ImageCandidates {
            image: "a".into(),
            options: vec![opt(37, 0, 30.0)]
        }])
        .is_err());
    }
}
