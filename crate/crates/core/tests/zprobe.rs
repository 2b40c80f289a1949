//! Temporary: dump collective embeddings for separability analysis.
use hypertraj::predictor::TrainedModel;
use hypertraj::sim::Dataset;
use std::io::Write;

#[test]
#[ignore]
fn dump_z() {
    let run = std::env::var("ZPROBE_RUN").unwrap();
    let model = TrainedModel::load(std::path::Path::new(&format!("{run}/run/checkpoint.bin"))).unwrap();
    let ds = Dataset::read_jsonl(std::path::Path::new(&format!("{run}/test.jsonl"))).unwrap();
    let mut out = std::fs::File::create(format!("{run}/zdump.csv")).unwrap();
    let chunk = 50;
    let mut start = 0;
    while start < ds.samples.len() {
        let end = (start + chunk).min(ds.samples.len());
        let samples: Vec<_> = ds.samples[start..end].iter().collect();
        let (g, enc) = model.eval_encoder_pass(&samples).unwrap();
        // last scale (K=3), hyperedge 0 of each scene
        let vars = enc.per_scale.last().unwrap();
        let z = g.data(vars.z);
        let (_, d) = g.shape(vars.z);
        let edges_per_scene = enc.topology.scales.last().unwrap().edges_per_scene;
        let q = g.data(enc.q);
        let (_, dq) = g.shape(enc.q);
        let n_agents = enc.topology.n_agents;
        for (local, s) in samples.iter().enumerate() {
            let j = local * edges_per_scene;
            let mut row: Vec<String> = z[j * d..(j + 1) * d].iter().map(|x| x.to_string()).collect();
            // append the scene's summed q as extra features
            let mut qsum = vec![0.0f32; dq];
            for a in 0..n_agents {
                for (acc, &x) in qsum.iter_mut().zip(&q[(local * n_agents + a) * dq..(local * n_agents + a + 1) * dq]) {
                    *acc += x;
                }
            }
            row.extend(qsum.iter().map(|x| x.to_string()));
            writeln!(out, "{},{}", s.types[0], row.join(",")).unwrap();
        }
        start = end;
    }
}
