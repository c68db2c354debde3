//! Per-modality k-means codebooks and the unified discrete vocabulary used
//! as masked-prediction targets. Audio ids occupy `[0, K_audio)`, video ids
//! `[K_audio, K_audio + K_video)`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::io::{read_block, read_line, write_block, DType};
use crate::tensor::{as_matrix, Tensor};

pub const FULL_AUDIO_CENTERS: usize = 4096;
pub const FULL_VIDEO_CENTERS: usize = 8192;
pub const TOY_AUDIO_CENTERS: usize = 64;
pub const TOY_VIDEO_CENTERS: usize = 128;
pub const MAX_TRAINING_VECTORS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Video,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// K×D centers
    pub centers: Tensor,
    pub modality: Modality,
    pub vocab_offset: usize,
    pub seed: u64,
}

/// Token ids with the modality of each contiguous segment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub segments: Vec<(Modality, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `self` followed by `other`.
    pub fn concat(mut self, other: TokenSeq) -> TokenSeq {
        self.ids.extend(other.ids);
        self.segments.extend(other.segments);
        self
    }
}

/// Output of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Tensor,
    /// Mean squared distortion after seeding, then after every iteration.
    pub distortion_trace: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl KMeans {
    pub fn into_codebook(self, modality: Modality, vocab_offset: usize) -> Codebook {
        Codebook {
            centers: self.centers,
            modality,
            vocab_offset,
            seed: self.seed,
        }
    }

    pub fn final_distortion(&self) -> f64 {
        *self.distortion_trace.last().expect("trace is never empty")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center (squared Euclidean); ties go to the lowest index.
pub fn nearest_center(centers: &Tensor, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(centers.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(centers: &Tensor, vectors: &Tensor, out: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (i, slot) in out.iter_mut().enumerate() {
        let (c, d) = nearest_center(centers, vectors.row(i));
        *slot = c;
        total += d;
    }
    total / vectors.rows() as f64
}

fn kmeans_plus_plus(vectors: &Tensor, k: usize, rng: &mut rng::Rng) -> Tensor {
    let (n, d) = (vectors.rows(), vectors.cols());
    let mut centers = Vec::with_capacity(k * d);
    centers.extend_from_slice(vectors.row(rng.gen_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(vectors.row(i), &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let c = vectors.row(pick).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(vectors.row(i), &c));
        }
        centers.extend(c);
    }
    Tensor::new(vec![k, d], centers).expect("k×d centers")
}

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iters`
/// iterations or once assignments stop changing; empty clusters are
/// re-seeded at the point farthest from its current center.
pub fn train_kmeans(vectors: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    let (n, d) = as_matrix(vectors, "train_kmeans")?;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs N >= k >= 1 (N={n}, k={k})")));
    }
    let mut rng = rng::substream(seed, "kmeans");
    let mut centers = kmeans_plus_plus(vectors, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut prev = vec![usize::MAX; n];
    let mut trace = vec![assign(&centers, vectors, &mut labels)];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            sums[c * d..(c + 1) * d]
                .iter_mut()
                .zip(vectors.row(i))
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(vectors.row(a), centers.row(labels[a]));
                        let db = sq_dist(vectors.row(b), centers.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                let p = vectors.row(far).to_vec();
                centers.data_mut()[c * d..(c + 1) * d].copy_from_slice(&p);
                // the re-seeded point now belongs to c
                labels[far] = c;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.data_mut()[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
        prev.copy_from_slice(&labels);
        trace.push(assign(&centers, vectors, &mut labels));
        if labels == prev {
            break;
        }
    }
    Ok(KMeans {
        centers,
        distortion_trace: trace,
        iterations,
        seed,
    })
}

/// Maps vectors to unified-vocabulary ids.
pub fn assign_tokens(cb: &Codebook, vectors: &Tensor) -> Result<TokenSeq> {
    let (n, d) = as_matrix(vectors, "assign_tokens")?;
    if d != cb.dim() {
        return Err(Error::shape("assign_tokens", format!("vector dim {d}, codebook dim {}", cb.dim())));
    }
    let ids = (0..n)
        .map(|i| nearest_center(&cb.centers, vectors.row(i)).0 + cb.vocab_offset)
        .collect();
    Ok(TokenSeq {
        ids,
        segments: vec![(cb.modality, n)],
    })
}

/// `K_audio + K_video`, after checking the two id ranges tile `[0, size)`.
pub fn unified_vocab_size(audio: &Codebook, video: &Codebook) -> Result<usize> {
    if audio.modality != Modality::Audio || video.modality != Modality::Video {
        return Err(Error::invalid("expected one audio and one video codebook"));
    }
    if audio.vocab_offset != 0 || video.vocab_offset != audio.size() {
        return Err(Error::invalid(format!(
            "overlapping or non-contiguous id ranges: audio [{}, {}), video [{}, {})",
            audio.vocab_offset,
            audio.vocab_offset + audio.size(),
            video.vocab_offset,
            video.vocab_offset + video.size()
        )));
    }
    Ok(audio.size() + video.size())
}

/// Uniform sample of at most `cap` rows (reservoir sampling, original order kept).
pub fn reservoir_sample(rows: &Tensor, cap: usize, seed: u64) -> Result<Tensor> {
    let (n, d) = as_matrix(rows, "reservoir_sample")?;
    if n <= cap {
        return Ok(rows.clone());
    }
    let mut rng = rng::substream(seed, "reservoir");
    let mut keep: Vec<usize> = (0..cap).collect();
    for i in cap..n {
        let j = rng.gen_range(0..=i);
        if j < cap {
            keep[j] = i;
        }
    }
    keep.sort_unstable();
    let data = keep.iter().flat_map(|&i| rows.row(i).iter().copied()).collect();
    Tensor::new(vec![cap, d], data)
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    /// Writes `modality k dim vocab_offset seed`, then the centers block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        writeln!(
            w,
            "{} {} {} {} {}",
            self.modality,
            self.size(),
            self.dim(),
            self.vocab_offset,
            self.seed
        )
        .and_then(|_| write_block(&mut w, &[("centers", &self.centers)], DType::F64))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let header = read_line(&mut r, path)?;
        let fields: Vec<&str> = header.split(' ').collect();
        let bad = || Error::corrupt(path, format!("bad codebook header `{header}`"));
        if fields.len() != 5 {
            return Err(bad());
        }
        let modality: Modality = fields[0].parse().map_err(|_| bad())?;
        let nums: Vec<u64> = fields[1..]
            .iter()
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let mut block = read_block(&mut r, path)?;
        let centers = match block.pop() {
            Some((name, t)) if name == "centers" && block.is_empty() => t,
            _ => return Err(Error::corrupt(path, "expected a single `centers` tensor")),
        };
        if centers.shape() != [nums[0] as usize, nums[1] as usize] {
            return Err(Error::corrupt(path, "centers shape disagrees with header"));
        }
        Ok(Codebook {
            centers,
            modality,
            vocab_offset: nums[2] as usize,
            seed: nums[3],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::indexed(seed, "vq-tests", n as u64);
        Tensor::new(vec![n, d], (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn codebook(centers: Tensor, offset: usize) -> Codebook {
        Codebook {
            centers,
            modality: Modality::Audio,
            vocab_offset: offset,
            seed: 0,
        }
    }

    #[test]
    fn k_equals_n_recovers_points() {
        let pts = random_rows(12, 3, 1);
        let km = train_kmeans(&pts, 12, 20, 9).unwrap();
        assert_eq!(km.final_distortion(), 0.0);
        let mut got: Vec<Vec<u64>> = (0..12).map(|i| km.centers.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = (0..12).map(|i| pts.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn two_blobs_recover_their_means() {
        let mut r = rng::substream(3, "blobs");
        let (n, sigma) = (200, 0.5);
        let mut data = Vec::new();
        let mut means = [[0.0; 2]; 2];
        for (b, centre) in [[-10.0, 0.0], [10.0, 5.0]].iter().enumerate() {
            for _ in 0..n {
                // sum of uniforms: zero mean, std sigma
                let p: Vec<f64> = (0..2)
                    .map(|j| centre[j] + sigma * (0..12).map(|_| r.gen::<f64>()).sum::<f64>() - 6.0 * sigma)
                    .collect();
                means[b][0] += p[0] / n as f64;
                means[b][1] += p[1] / n as f64;
                data.extend(p);
            }
        }
        let km = train_kmeans(&Tensor::new(vec![2 * n, 2], data).unwrap(), 2, 50, 4).unwrap();
        let tol = 3.0 * sigma / (n as f64).sqrt();
        for m in means {
            let (c, _) = nearest_center(&km.centers, &m);
            for j in 0..2 {
                assert!((km.centers.row(c)[j] - m[j]).abs() <= tol);
            }
        }
    }

    #[test]
    fn too_few_vectors_rejected() {
        assert!(train_kmeans(&random_rows(3, 2, 5), 4, 10, 0).is_err());
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let pts = Tensor::new(vec![10, 2], [0.25, 0.5].repeat(10)).unwrap();
        let km = train_kmeans(&pts, 4, 10, 1).unwrap();
        assert_eq!(km.final_distortion(), 0.0);
    }

    #[test]
    fn assignment_examples() {
        let centers = random_rows(8, 4, 6);
        let cb = codebook(centers.clone(), 100);
        let x = Tensor::new(vec![1, 4], centers.row(5).to_vec()).unwrap();
        assert_eq!(assign_tokens(&cb, &x).unwrap().ids, vec![105]);

        let mut c = Tensor::zeros(&[8, 1]);
        for (i, v) in c.data_mut().iter_mut().enumerate() {
            *v = 10.0 + i as f64;
        }
        c.data_mut()[2] = -1.0;
        c.data_mut()[7] = 1.0;
        let tie = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(assign_tokens(&codebook(c, 0), &tie).unwrap().ids, vec![2]);

        assert!(assign_tokens(&cb, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn assignment_matches_exhaustive_search() {
        let cb = codebook(random_rows(16, 5, 7), 3);
        let xs = random_rows(50, 5, 8);
        let ids = assign_tokens(&cb, &xs).unwrap().ids;
        for (i, id) in ids.iter().enumerate() {
            let dists: Vec<f64> = (0..16).map(|c| sq_dist(cb.centers.row(c), xs.row(i))).collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let brute = dists.iter().position(|d| *d == min).unwrap();
            assert_eq!(*id, brute + 3);
        }
    }

    #[test]
    fn vocab_sizes() {
        let mk = |k, m, off| Codebook {
            centers: Tensor::zeros(&[k, 1]),
            modality: m,
            vocab_offset: off,
            seed: 0,
        };
        assert_eq!(
            unified_vocab_size(&mk(FULL_AUDIO_CENTERS, Modality::Audio, 0), &mk(FULL_VIDEO_CENTERS, Modality::Video, FULL_AUDIO_CENTERS)).unwrap(),
            12288
        );
        let (a, v) = (mk(8, Modality::Audio, 0), mk(16, Modality::Video, 8));
        let size = unified_vocab_size(&a, &v).unwrap();
        assert_eq!(size, 24);
        let top = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(assign_tokens(&v, &top).unwrap().ids[0], size - 1 - 15);
        assert_eq!(v.vocab_offset + v.size() - 1, size - 1);
        assert!(unified_vocab_size(&a, &mk(16, Modality::Video, 4)).is_err());
    }

    #[test]
    fn codebook_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audio.cb");
        let cb = Codebook {
            centers: random_rows(4, 3, 11),
            modality: Modality::Video,
            vocab_offset: 64,
            seed: 17,
        };
        cb.save(&path).unwrap();
        let text = std::fs::read(&path).unwrap();
        assert!(text.starts_with(b"video 4 3 64 17\n"));
        assert_eq!(Codebook::load(&path).unwrap(), cb);
    }

    #[test]
    fn reservoir_sample_caps_and_is_deterministic() {
        let rows = random_rows(100, 2, 12);
        let s = reservoir_sample(&rows, 10, 5).unwrap();
        assert_eq!(s.shape(), &[10, 2]);
        assert_eq!(s, reservoir_sample(&rows, 10, 5).unwrap());
        assert_eq!(reservoir_sample(&rows, 200, 5).unwrap(), rows);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn lloyd_properties(n in 4usize..60, k in 1usize..6, d in 1usize..4, seed in 0u64..500) {
            prop_assume!(k <= n);
            let pts = random_rows(n, d, seed);
            let km = train_kmeans(&pts, k, 30, seed).unwrap();
            for w in km.distortion_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", km.distortion_trace);
            }
            prop_assert!(km.final_distortion() <= km.distortion_trace[0]);
            let again = train_kmeans(&pts, k, 30, seed).unwrap();
            prop_assert_eq!(&km.centers, &again.centers);
            let cb = km.into_codebook(Modality::Audio, 5);
            let ids = assign_tokens(&cb, &cb.centers).unwrap().ids;
            // duplicate centers may collapse onto the lower index
            for (i, id) in ids.iter().enumerate() {
                prop_assert!(*id == i + 5 || cb.centers.row(*id - 5) == cb.centers.row(i));
            }
        }
    }
}
