//! Axis-aligned bounding-volume hierarchy over arbitrary primitives.

use crate::Vec3;

/// Below this many primitives queries scan every primitive in index order.
pub const BRUTE_FORCE_LIMIT: usize = 64;

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        b
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }

    /// Squared distance from `p` to the box (0 inside).
    #[inline]
    pub fn sq_distance(&self, p: &Vec3) -> f64 {
        let d = (self.min - p).sup(&Vec3::zeros()).sup(&(p - self.max));
        d.norm_squared()
    }

    #[inline]
    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaf: `start..start + count` in `order`. Internal: `count == 0`,
    /// children at `start` and `start + 1`... stored explicitly below.
    start: usize,
    count: usize,
    right: usize,
}

/// BVH with nodes stored in pre-order, so every child index is larger than
/// its parent's. That makes bottom-up refits a reverse scan.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    len: usize,
}

impl Bvh {
    pub fn build(boxes: &[Aabb]) -> Self {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        let mut nodes = Vec::new();
        if !boxes.is_empty() {
            let centers: Vec<Vec3> = boxes.iter().map(Aabb::center).collect();
            build_node(boxes, &centers, &mut order, 0, boxes.len(), &mut nodes);
        }
        Self { nodes, order, len: boxes.len() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Recompute node bounds for moved primitives without changing topology.
    pub fn refit(&mut self, boxes: &[Aabb]) {
        assert_eq!(boxes.len(), self.len);
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let bounds = if node.count > 0 {
                self.order[node.start..node.start + node.count]
                    .iter()
                    .fold(Aabb::empty(), |b, &p| b.union(&boxes[p]))
            } else {
                self.nodes[i + 1].bounds.union(&self.nodes[node.right].bounds)
            };
            self.nodes[i].bounds = bounds;
        }
    }

    /// Nearest primitive to `p` under `eval`, which returns the squared
    /// distance and a payload, or `None` to skip a primitive. Ties on distance
    /// go to the lowest primitive id.
    pub fn nearest<T, F>(&self, p: &Vec3, mut eval: F) -> Option<(usize, f64, T)>
    where
        F: FnMut(usize) -> Option<(f64, T)>,
    {
        let mut best: Option<(usize, f64, T)> = None;
        let mut consider = |id: usize, best: &mut Option<(usize, f64, T)>| {
            if let Some((d, payload)) = eval(id) {
                let better = match best {
                    None => true,
                    Some((bid, bd, _)) => d < *bd || (d == *bd && id < *bid),
                };
                if better {
                    *best = Some((id, d, payload));
                }
            }
        };
        if self.len < BRUTE_FORCE_LIMIT {
            for id in 0..self.len {
                consider(id, &mut best);
            }
            return best;
        }
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            let bound = node.bounds.sq_distance(p);
            if let Some((_, bd, _)) = &best {
                if bound > *bd {
                    continue;
                }
            }
            if node.count > 0 {
                for &id in &self.order[node.start..node.start + node.count] {
                    consider(id, &mut best);
                }
            } else {
                let (l, r) = (i + 1, node.right);
                let (dl, dr) = (self.nodes[l].bounds.sq_distance(p), self.nodes[r].bounds.sq_distance(p));
                // visit the closer child first
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }

    /// Calls `visit` for every primitive whose box contains `p` (with
    /// tolerance), in increasing id order. Stops early when `visit` returns
    /// `true`.
    pub fn find_containing<F>(&self, p: &Vec3, tol: f64, mut visit: F) -> Option<usize>
    where
        F: FnMut(usize) -> bool,
    {
        if self.len < BRUTE_FORCE_LIMIT {
            return (0..self.len).find(|&id| visit(id));
        }
        let mut hits = Vec::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if !node.bounds.contains(p, tol) {
                continue;
            }
            if node.count > 0 {
                hits.extend_from_slice(&self.order[node.start..node.start + node.count]);
            } else {
                stack.push(node.right);
                stack.push(i + 1);
            }
        }
        hits.sort_unstable();
        hits.into_iter().find(|&id| visit(id))
    }
}

fn build_node(
    boxes: &[Aabb],
    centers: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let index = nodes.len();
    let bounds = order[start..end].iter().fold(Aabb::empty(), |b, &i| b.union(&boxes[i]));
    nodes.push(Node { bounds, start, count: 0, right: 0 });
    if end - start <= LEAF_SIZE {
        nodes[index].count = end - start;
        return index;
    }
    let cb = Aabb::from_points(order[start..end].iter().map(|&i| &centers[i]));
    let extent = cb.max - cb.min;
    let axis = extent.imax();
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centers[a][axis].total_cmp(&centers[b][axis]).then(a.cmp(&b))
    });
    build_node(boxes, centers, order, start, mid, nodes);
    let right = build_node(boxes, centers, order, mid, end, nodes);
    nodes[index].right = right;
    index
}
