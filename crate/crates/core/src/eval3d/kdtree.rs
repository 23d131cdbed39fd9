use super::dist2;

const LEAF_SIZE: usize = 16;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact nearest-neighbour index over 3-D points: median splits on the
/// axis of largest extent, leaves of at most 16 points.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &mut self.order[start..end];
        let pts = &self.points;
        let axis = (0..3)
            .map(|a| {
                let (lo, hi) = slice
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(pts[i][a]), hi.max(pts[i][a]))
                    });
                (a, hi - lo)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(a, _)| a)
            .unwrap_or(0);
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = pts[slice[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Index and squared distance of the nearest point, `None` when empty.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        let mut stack = vec![(0usize, 0.0f64)];
        while let Some((id, bound)) = stack.pop() {
            if bound > best.1 {
                continue;
            }
            match self.nodes[id] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let d = dist2(q, &self.points[i]);
                        if d < best.1 || (d == best.1 && i < best.0) {
                            best = (i, d);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = q[axis] - value;
                    let (near, far) = if diff < 0.0 {
                        (left, right)
                    } else {
                        (right, left)
                    };
                    stack.push((far, diff * diff));
                    stack.push((near, 0.0));
                }
            }
        }
        Some(best)
    }
}
