//! Scores a small query/gallery set with plain cosine ranking and with
//! k-reciprocal re-ranking.
//!
//! cargo run -p mmfl --example eval_rerank

use mmfl::eval::{compute_cmc_map, distance_matrix, k_reciprocal_rerank, EmbeddingStore, RerankParams};

fn unit(angle: f64) -> Vec<f32> {
    vec![angle.cos() as f32, angle.sin() as f32]
}

fn main() -> mmfl::Result<()> {
    // pid 3 at 0.711 sits between query 0 and its second match at -0.263
    let query = EmbeddingStore::from_rows(&[unit(0.25), unit(2.398), unit(3.55)], &[0, 1, 2], true)?;
    let gallery_angles = [-0.263, 0.097, 2.223, 1.936, 3.834, 4.506, 0.711, 2.853];
    let gallery_rows: Vec<Vec<f32>> = gallery_angles.iter().map(|&a| unit(a)).collect();
    let gallery = EmbeddingStore::from_rows(&gallery_rows, &[0, 0, 1, 1, 2, 2, 3, 4], true)?;

    let (qp, gp) = (query.pids(), gallery.pids());
    let plain = compute_cmc_map(&distance_matrix(&query, &gallery)?, &qp, &gp, 5)?;
    let params = RerankParams { k1: 4, k2: 2, lambda: 0.3 };
    let reranked = compute_cmc_map(&k_reciprocal_rerank(&query, &gallery, params)?, &qp, &gp, 5)?;
    println!("plain     mAP {:.4}  CMC {:?}", plain.map, plain.cmc);
    println!("reranked  mAP {:.4}  CMC {:?}", reranked.map, reranked.cmc);
    Ok(())
}
