use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsConfig {
    pub max_updates: usize,
    #[serde(default = "history")]
    pub history: usize,
    #[serde(default = "one")]
    pub lr: f64,
    #[serde(default = "tol_grad")]
    pub tol_grad: f64,
    #[serde(default = "tol_change")]
    pub tol_change: f64,
    #[serde(default = "c1")]
    pub c1: f64,
    #[serde(default = "c2")]
    pub c2: f64,
    /// Line-search evaluations per update.
    #[serde(default = "max_ls")]
    pub max_line_search: usize,
}

fn history() -> usize {
    10
}
fn one() -> f64 {
    1.0
}
fn tol_grad() -> f64 {
    1e-7
}
fn tol_change() -> f64 {
    1e-9
}
fn c1() -> f64 {
    1e-4
}
fn c2() -> f64 {
    0.9
}
fn max_ls() -> usize {
    25
}

impl LbfgsConfig {
    pub fn new(max_updates: usize) -> Self {
        Self {
            max_updates,
            history: history(),
            lr: one(),
            tol_grad: tol_grad(),
            tol_change: tol_change(),
            c1: c1(),
            c2: c2(),
            max_line_search: max_ls(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::Config("L-BFGS history must be positive".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < c1 < c2 < 1, got {} and {}",
                self.c1, self.c2
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("L-BFGS lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LbfgsStop {
    GradientTolerance,
    ChangeTolerance,
    MaxUpdates,
    /// The line search found no decrease along a descent direction.
    LineSearchFailed,
    /// The objective raised a numeric error; the best iterate is returned.
    ObjectiveFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective at `x0` followed by the value after each update.
    pub trace: Vec<f64>,
    pub updates: usize,
    pub evaluations: usize,
    pub stop: LbfgsStop,
}

impl LbfgsResult {
    pub fn failed(&self) -> bool {
        matches!(self.stop, LbfgsStop::LineSearchFailed | LbfgsStop::ObjectiveFailed)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Evaluates the objective, mapping a non-finite value to `+inf` so line
/// search comparisons stay meaningful.
struct Evaluator<'a, F> {
    f: &'a mut F,
    count: usize,
}

impl<F> Evaluator<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.count += 1;
        let (v, g) = (self.f)(x)?;
        if g.len() != x.len() {
            return Err(Error::Contract(format!(
                "objective returned {} gradient entries for {} variables",
                g.len(),
                x.len()
            )));
        }
        Ok((if v.is_finite() { v } else { f64::INFINITY }, g))
    }

    fn at(&mut self, x: &[f64], t: f64, d: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        self.eval(&p)
    }
}

/// Minimizes `objective` (value and gradient) from `x0` with L-BFGS and a
/// strong-Wolfe line search.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("L-BFGS start point is not finite".into()));
    }
    let mut ev = Evaluator {
        f: &mut objective,
        count: 0,
    };
    let mut x = x0.to_vec();
    let (mut f, mut g) = ev.eval(&x)?;
    let mut trace = vec![f];
    let done = |x: Vec<f64>, f, trace, updates, count, stop| LbfgsResult {
        x,
        value: f,
        trace,
        updates,
        evaluations: count,
        stop,
    };
    if max_abs(&g) <= cfg.tol_grad {
        return Ok(done(x, f, trace, 0, ev.count, LbfgsStop::GradientTolerance));
    }

    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut rho: VecDeque<f64> = VecDeque::new();
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut t = 0.0;
    let mut prev_g: Vec<f64> = Vec::new();
    let mut updates = 0;

    let stop = loop {
        if updates == cfg.max_updates {
            break LbfgsStop::MaxUpdates;
        }
        if updates > 0 {
            let y: Vec<f64> = g.iter().zip(&prev_g).map(|(a, b)| a - b).collect();
            let s: Vec<f64> = d.iter().map(|v| v * t).collect();
            let ys = dot(&y, &s);
            if ys > 1e-10 {
                if s_hist.len() == cfg.history {
                    s_hist.pop_front();
                    y_hist.pop_front();
                    rho.pop_front();
                }
                s_hist.push_back(s);
                y_hist.push_back(y);
                rho.push_back(1.0 / ys);
            }
            d = two_loop(&g, &s_hist, &y_hist, &rho);
        }
        prev_g = g.clone();
        t = if updates == 0 {
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            (1.0f64).min(1.0 / l1) * cfg.lr
        } else {
            cfg.lr
        };
        let mut gtd = dot(&g, &d);
        if !(gtd < 0.0) {
            // Curvature history no longer yields descent; restart from -g.
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
        }
        let ls = match strong_wolfe(&mut ev, &x, t, &d, f, &g, gtd, cfg) {
            Ok(ls) => ls,
            Err(e) if e.is_numeric() => break LbfgsStop::ObjectiveFailed,
            Err(e) => return Err(e),
        };
        if !(ls.f < f || (ls.f <= f && ls.wolfe)) {
            break LbfgsStop::LineSearchFailed;
        }
        t = ls.t;
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += t * di;
        }
        f = ls.f;
        g = ls.g;
        updates += 1;
        trace.push(f);
        if max_abs(&g) <= cfg.tol_grad {
            break LbfgsStop::GradientTolerance;
        }
        if max_abs(&d) * t.abs() <= cfg.tol_change {
            break LbfgsStop::ChangeTolerance;
        }
    };
    Ok(done(x, f, trace, updates, ev.count, stop))
}

/// Two-loop recursion: approximate `-H g`.
fn two_loop(
    g: &[f64],
    s_hist: &VecDeque<Vec<f64>>,
    y_hist: &VecDeque<Vec<f64>>,
    rho: &VecDeque<f64>,
) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let k = s_hist.len();
    let mut alpha = vec![0.0; k];
    for i in (0..k).rev() {
        alpha[i] = dot(&s_hist[i], &q) * rho[i];
        q.iter_mut().zip(&y_hist[i]).for_each(|(qi, yi)| *qi -= alpha[i] * yi);
    }
    let h_diag = match k {
        0 => 1.0,
        _ => {
            let y = &y_hist[k - 1];
            1.0 / (rho[k - 1] * dot(y, y))
        }
    };
    let mut r: Vec<f64> = q.iter().map(|v| v * h_diag).collect();
    for i in 0..k {
        let beta = dot(&y_hist[i], &r) * rho[i];
        r.iter_mut().zip(&s_hist[i]).for_each(|(ri, si)| *ri += si * (alpha[i] - beta));
    }
    r
}

/// Minimizer of the cubic through two points with slopes, clamped to bounds.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: Option<(f64, f64)>) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if pos.is_finite() {
            return pos.max(lo).min(hi);
        }
    }
    (lo + hi) / 2.0
}

struct LineSearch {
    t: f64,
    f: f64,
    g: Vec<f64>,
    /// Both strong-Wolfe conditions hold at `t`.
    wolfe: bool,
}

#[derive(Clone)]
struct Point {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    ev: &mut Evaluator<'_, F>,
    x: &[f64],
    t0: f64,
    d: &[f64],
    f: f64,
    g: &[f64],
    gtd: f64,
    cfg: &LbfgsConfig,
) -> Result<LineSearch>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (c1, c2) = (cfg.c1, cfg.c2);
    let d_norm = max_abs(d);
    let mut t = t0;
    let (f_new, g_new) = ev.at(x, t, d)?;
    let mut cur = Point {
        t,
        gtd: dot(&g_new, d),
        f: f_new,
        g: g_new,
    };
    let mut prev = Point {
        t: 0.0,
        f,
        g: g.to_vec(),
        gtd,
    };
    let mut iters = 0;
    let mut done = false;
    let mut bracket: Vec<Point>;

    loop {
        if iters >= cfg.max_line_search {
            let start = Point {
                t: 0.0,
                f,
                g: g.to_vec(),
                gtd,
            };
            bracket = vec![start, cur];
            break;
        }
        if cur.f > f + c1 * cur.t * gtd || (iters > 1 && cur.f >= prev.f) {
            bracket = vec![prev, cur];
            break;
        }
        if cur.gtd.abs() <= -c2 * gtd {
            bracket = vec![cur];
            done = true;
            break;
        }
        if cur.gtd >= 0.0 {
            bracket = vec![prev, cur];
            break;
        }
        let min_step = cur.t + 0.01 * (cur.t - prev.t);
        let max_step = cur.t * 10.0;
        t = cubic_interpolate(prev.t, prev.f, prev.gtd, cur.t, cur.f, cur.gtd, Some((min_step, max_step)));
        let (f_new, g_new) = ev.at(x, t, d)?;
        prev = cur;
        cur = Point {
            t,
            gtd: dot(&g_new, d),
            f: f_new,
            g: g_new,
        };
        iters += 1;
    }

    // Zoom inside the bracket.
    let mut insufficient = false;
    let order = |b: &[Point]| if b[0].f <= b[b.len() - 1].f { (0, 1) } else { (1, 0) };
    let (mut low, mut high) = if bracket.len() == 2 { order(&bracket) } else { (0, 0) };
    while !done && iters < cfg.max_line_search {
        let (b0, b1) = (&bracket[0], &bracket[1]);
        if (b1.t - b0.t).abs() * d_norm < cfg.tol_change {
            break;
        }
        t = cubic_interpolate(b0.t, b0.f, b0.gtd, b1.t, b1.f, b1.gtd, None);
        let bmax = b0.t.max(b1.t);
        let bmin = b0.t.min(b1.t);
        let eps = 0.1 * (bmax - bmin);
        if (bmax - t).min(t - bmin) < eps {
            if insufficient || t >= bmax || t <= bmin {
                t = if (t - bmax).abs() < (t - bmin).abs() {
                    bmax - eps
                } else {
                    bmin + eps
                };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let (f_new, g_new) = ev.at(x, t, d)?;
        let p = Point {
            t,
            gtd: dot(&g_new, d),
            f: f_new,
            g: g_new,
        };
        iters += 1;
        if p.f > f + c1 * t * gtd || p.f >= bracket[low].f {
            bracket[high] = p;
            (low, high) = order(&bracket);
        } else {
            if p.gtd.abs() <= -c2 * gtd {
                done = true;
            } else if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket[high] = bracket[low].clone();
            }
            bracket[low] = p;
        }
    }
    let best = bracket.swap_remove(low);
    Ok(LineSearch {
        t: best.t,
        f: best.f,
        g: best.g,
        wolfe: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_recovers_quadratic_minimum() {
        // f = (t - 2)^2: f(0)=4, f'(0)=-4, f(3)=1, f'(3)=2.
        let t = cubic_interpolate(0.0, 4.0, -4.0, 3.0, 1.0, 2.0, None);
        assert!((t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_loop_without_history_is_steepest_descent() {
        let d = two_loop(&[1.0, -2.0], &VecDeque::new(), &VecDeque::new(), &VecDeque::new());
        assert_eq!(d, vec![-1.0, 2.0]);
    }
}
