//! Clusters random unit vectors, then compares probed search against exhaustive search.
//!
//! cargo run -p mmfl --example kmeans_index -- [rows] [clusters]

use mmfl::eval::{build_index, cosine_distance, kmeans, query_index, EmbeddingStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> mmfl::Result<()> {
    let mut args = std::env::args().skip(1).filter_map(|a| a.parse::<usize>().ok());
    let n = args.next().unwrap_or(2000);
    let clusters = args.next().unwrap_or(16);
    let dim = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();
    let store = EmbeddingStore::from_rows(&rows, &vec![0; n], true)?;
    let km = kmeans(&store, clusters, 0)?;
    println!("k-means: {} iterations, inertia {:.3} -> {:.3}", km.iterations, km.inertia_history[0], km.inertia_history.last().unwrap());

    let index = build_index(store, clusters, 0)?;
    let q = &rows[0];
    let mut exhaustive: Vec<(usize, f64)> = rows.iter().enumerate().map(|(i, r)| (i, cosine_distance(q, r))).collect();
    exhaustive.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let truth: Vec<usize> = exhaustive.iter().take(10).map(|p| p.0).collect();
    for probe in [1, 3, clusters] {
        let hits = query_index(&index, q, 10, probe)?;
        let found = hits.iter().filter(|h| truth.contains(&h.row)).count();
        println!("probe {probe:>3}: {found}/10 of the exhaustive top 10");
    }
    Ok(())
}
