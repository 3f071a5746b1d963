//! Reference computations that share no code with the library.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use dashu_float::round::mode::HalfAway;
use dashu_float::{Context, FBig};
use magtrack::Vec3;

type Big = FBig<HalfAway, 2>;

const BITS: usize = 256;

fn big(x: f64) -> Big {
    Big::try_from(x).unwrap().with_precision(BITS).value()
}

/// On-axis loop field μ0·n·a²·I / (2·(a² + r²)^{3/2}) in 256-bit arithmetic.
pub fn loop_field_hp(turns: u32, radius_m: f64, current_a: f64, r: f64) -> f64 {
    let ctx = Context::<HalfAway>::new(BITS);
    let pi: Big = ctx.pi().value();
    let mu0 = big(4.0) * pi * big(1e-7);
    let a2 = big(radius_m) * big(radius_m);
    let s = a2.clone() + big(r) * big(r);
    let root = ctx.sqrt(s.repr()).value();
    let num = mu0 * big(turns as f64) * a2 * big(current_a);
    let den = big(2.0) * s * root;
    (num / den).to_f64().value()
}

pub fn objective(beacons: &[Vec3], d: &[f64], p: &Vec3) -> f64 {
    beacons.iter().zip(d).map(|(b, di)| ((p - b).norm() - di).powi(2)).sum()
}

#[derive(Clone, Copy)]
struct Cell {
    lo: [f64; 3],
    hi: [f64; 3],
    bound: f64,
}

impl PartialEq for Cell {
    fn eq(&self, o: &Self) -> bool {
        self.bound == o.bound
    }
}
impl Eq for Cell {}
impl PartialOrd for Cell {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cell {
    fn cmp(&self, o: &Self) -> Ordering {
        o.bound.total_cmp(&self.bound)
    }
}

fn lower_bound(beacons: &[Vec3], d: &[f64], lo: &[f64; 3], hi: &[f64; 3]) -> f64 {
    let mut sum = 0.0;
    for (b, di) in beacons.iter().zip(d) {
        let mut near = 0.0;
        let mut far = 0.0;
        for k in 0..3 {
            let gap = (lo[k] - b[k]).max(b[k] - hi[k]).max(0.0);
            let span = (b[k] - lo[k]).abs().max((hi[k] - b[k]).abs());
            near += gap * gap;
            far += span * span;
        }
        let (near, far) = (near.sqrt(), far.sqrt());
        let miss = (near - di).max(di - far).max(0.0);
        sum += miss * miss;
    }
    sum
}

fn center(lo: &[f64; 3], hi: &[f64; 3]) -> Vec3 {
    Vec3::new(0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2]))
}

/// Compass search with step halving, down to `min_step`.
pub fn compass(beacons: &[Vec3], d: &[f64], start: Vec3, mut step: f64, min_step: f64) -> (Vec3, f64) {
    let mut p = start;
    let mut f = objective(beacons, d, &p);
    let mut evals = 0usize;
    while step >= min_step && evals < 2_000_000 {
        let mut moved = false;
        for k in 0..3 {
            for s in [1.0, -1.0] {
                let mut q = p;
                q[k] += s * step;
                let fq = objective(beacons, d, &q);
                evals += 1;
                if fq < f {
                    p = q;
                    f = fq;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (p, f)
}

/// Global minimum of the range objective over a box: exhaustive 1 cm grid,
/// pruned by interval bounds, then compass refinement of the best basins.
pub fn grid_oracle(beacons: &[Vec3], d: &[f64], lo: [f64; 3], hi: [f64; 3]) -> (Vec3, f64) {
    const LEAF: f64 = 0.01;
    let mut heap = BinaryHeap::new();
    heap.push(Cell {
        lo,
        hi,
        bound: lower_bound(beacons, d, &lo, &hi),
    });
    let mut best = f64::INFINITY;
    let mut leaves: Vec<(f64, Vec3)> = Vec::new();
    while let Some(cell) = heap.pop() {
        if cell.bound > best {
            break;
        }
        let c = center(&cell.lo, &cell.hi);
        let fc = objective(beacons, d, &c);
        best = best.min(fc);
        let ext = (0..3).map(|k| cell.hi[k] - cell.lo[k]).fold(0.0, f64::max);
        if ext <= LEAF {
            leaves.push((fc, c));
            continue;
        }
        let k = (0..3).max_by(|&i, &j| (cell.hi[i] - cell.lo[i]).total_cmp(&(cell.hi[j] - cell.lo[j]))).unwrap();
        let mid = 0.5 * (cell.lo[k] + cell.hi[k]);
        for half in 0..2 {
            let (mut l, mut h) = (cell.lo, cell.hi);
            if half == 0 {
                h[k] = mid;
            } else {
                l[k] = mid;
            }
            let bound = lower_bound(beacons, d, &l, &h);
            if bound <= best {
                heap.push(Cell { lo: l, hi: h, bound });
            }
        }
    }
    leaves.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut starts: Vec<Vec3> = Vec::new();
    for (_, p) in &leaves {
        if starts.iter().all(|s| (s - p).norm() > 0.03) {
            starts.push(*p);
            if starts.len() == 8 {
                break;
            }
        }
    }
    starts
        .into_iter()
        .map(|s| compass(beacons, d, s, LEAF, 1e-10))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one leaf")
}
