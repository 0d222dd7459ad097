//! Disjoint sets over voxel indices, carrying the per-component state the
//! graph merge needs: size and largest internal merge weight.

#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    internal: Vec<f64>,
    components: usize,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        assert!(n <= u32::MAX as usize, "too many elements for u32 indices");
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
            components: n,
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Root of `i`, halving the path on the way up.
    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] as usize != i {
            let grand = self.parent[self.parent[i] as usize];
            self.parent[i] = grand;
            i = grand as usize;
        }
        i
    }

    /// Size of the component whose root is `root`.
    pub fn size(&self, root: usize) -> usize {
        self.size[root] as usize
    }

    /// Largest merge weight inside the component whose root is `root`.
    pub fn internal(&self, root: usize) -> f64 {
        self.internal[root]
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Joins two roots by size and records `weight` as the new internal
    /// difference. Returns the surviving root.
    pub fn union_roots(&mut self, a: usize, b: usize, weight: f64) -> usize {
        debug_assert_ne!(a, b);
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big as u32;
        self.size[big] += self.size[small];
        self.internal[big] = weight;
        self.components -= 1;
        big
    }
}
