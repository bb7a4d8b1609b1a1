//! Felzenszwalb-Huttenlocher graph segmentation on the 8-connected pixel grid.

use image::imageops;
use image::{ImageBuffer, Rgb, Rgb32FImage};

use super::SegmentationParams;
use crate::ingest::Frame;

/// Per-pixel segment labels, row-major, contiguous in `0..count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl LabelMap {
    pub fn label(&self, x: u32, y: u32) -> u32 {
        self.labels[(y * self.width + x) as usize]
    }

    /// Pixel count per label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.count];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

struct Forest {
    parent: Vec<u32>,
    size: Vec<u32>,
    threshold: Vec<f32>,
}

impl Forest {
    fn new(n: usize, k: f32) -> Self {
        Forest {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            threshold: vec![k; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn join(&mut self, a: u32, b: u32) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }
}

#[derive(Clone, Copy)]
struct Edge {
    weight: f32,
    a: u32,
    b: u32,
}

fn smoothed(frame: &Frame, sigma: f64) -> Rgb32FImage {
    let float: Rgb32FImage = ImageBuffer::from_fn(frame.width(), frame.height(), |x, y| {
        let p = frame.pixels.get_pixel(x, y);
        Rgb([p[0] as f32, p[1] as f32, p[2] as f32])
    });
    if sigma > 0.0 {
        imageops::blur(&float, sigma as f32)
    } else {
        float
    }
}

fn grid_edges(img: &Rgb32FImage) -> Vec<Edge> {
    let (w, h) = img.dimensions();
    let dist = |a: &Rgb<f32>, b: &Rgb<f32>| {
        let d: f32 = (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum();
        d.sqrt()
    };
    let mut edges = Vec::with_capacity(4 * (w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let here = img.get_pixel(x, y);
            let id = y * w + x;
            let mut push = |nx: u32, ny: u32| {
                edges.push(Edge {
                    weight: dist(here, img.get_pixel(nx, ny)),
                    a: id,
                    b: ny * w + nx,
                });
            };
            if x + 1 < w {
                push(x + 1, y);
            }
            if y + 1 < h {
                push(x, y + 1);
                if x + 1 < w {
                    push(x + 1, y + 1);
                }
                if x > 0 {
                    push(x - 1, y + 1);
                }
            }
        }
    }
    edges
}

/// Over-segments `frame`: edges are processed in ascending weight and two
/// components merge when the edge is no heavier than either component's
/// internal difference plus `k / size`. Components smaller than
/// `min_segment` are then absorbed along the cheapest remaining edges.
pub fn segment_graph(frame: &Frame, params: &SegmentationParams) -> LabelMap {
    let (width, height) = (frame.width(), frame.height());
    let n = (width * height) as usize;
    let img = smoothed(frame, params.sigma);
    let mut edges = grid_edges(&img);
    // Stable sort keeps generation order among equal weights.
    edges.sort_by(|a, b| a.weight.total_cmp(&b.weight));

    let k = params.k as f32;
    let mut forest = Forest::new(n, k);
    for e in &edges {
        let ra = forest.find(e.a);
        let rb = forest.find(e.b);
        if ra != rb
            && e.weight <= forest.threshold[ra as usize]
            && e.weight <= forest.threshold[rb as usize]
        {
            let root = forest.join(ra, rb);
            forest.threshold[root as usize] = e.weight + k / forest.size[root as usize] as f32;
        }
    }
    let min = params.min_segment.min(n) as u32;
    for e in &edges {
        let ra = forest.find(e.a);
        let rb = forest.find(e.b);
        if ra != rb && (forest.size[ra as usize] < min || forest.size[rb as usize] < min) {
            forest.join(ra, rb);
        }
    }

    let mut remap = vec![u32::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut count = 0u32;
    for i in 0..n as u32 {
        let root = forest.find(i) as usize;
        if remap[root] == u32::MAX {
            remap[root] = count;
            count += 1;
        }
        labels.push(remap[root]);
    }
    LabelMap {
        width,
        height,
        labels,
        count: count as usize,
    }
}
