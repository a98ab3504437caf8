//! Detector-agnostic keypoint metrics, detection with a trained model, and
//! the keypoint, embedding and report file formats.

mod detection;
mod report;
mod scores;

pub use detection::{
    decode_embeddings, detect, encode_embeddings, keypoints_to_string, parse_keypoints, read_keypoints,
    score_cloud, select_keypoints, top_k_by_score, write_keypoints, DetectOptions, DetectionResult, Embeddings,
    Scored, EMBEDDING_MAGIC,
};
pub use report::{curve_csv, report_csv, write_report, ReportRow};
pub use scores::{
    cluster_purity, correspondence_iou, geodesic_matrix, greedy_match_count, keypoint_miou, kmeans,
    mean_correspondence_ratio, miou_curve, repeatability_fraction, rotation_repeatability, KMeans, KMEANS_RESTARTS,
    KMEANS_TOL, MIOU_THRESHOLDS,
};
