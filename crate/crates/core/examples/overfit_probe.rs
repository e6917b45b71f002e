//! Probe: stage-2 unified overfit convergence.
use mscale_core::generation::{GuidanceConfig, Pipeline};
use mscale_core::model::{init_params, ModelConfig};
use mscale_core::tokenizer::PixelLatentMap;
use mscale_core::training::data::toy_unified_data;
use mscale_core::training::{StageRunner, TrainPlan};

fn main() {
    let t0 = std::time::Instant::now();
    let config = ModelConfig { max_scales: 4, ..ModelConfig::desk_small() };
    let params = init_params(&config, 42);
    let pixels = PixelLatentMap::new(config.code_dim, 7);
    let data = toy_unified_data(&pixels).unwrap();
    let plan = TrainPlan::stage2(3000);
    let mut runner = StageRunner::new(config.clone(), params, None, data.clone(), plan, 99).unwrap();
    println!("accumulation counts: {:?}", runner.accumulation_counts());
    for chunk in 0..15 {
        runner.run(200).unwrap();
        let line = runner.log.last().unwrap();
        let ntp = runner.eval_ntp().unwrap();
        // greedy regen accuracy on first 2 t2i + first edit pair
        let pipe = Pipeline { params: &runner.params, config: &config, pixels: &pixels };
        let mut t2i_acc = 0.0;
        for i in 0..2 {
            let g = &data.gen[i];
            let prompt: String = g.caption.as_ref().unwrap()[1..g.caption.as_ref().unwrap().len()-1]
                .iter().map(|&b| b as u8 as char).collect();
            let gcfg = GuidanceConfig { temperature: 1e-12, ..GuidanceConfig::t2i_default() };
            let codes = pipe.t2i_codes(&prompt, &g.schedule, &gcfg, 1).unwrap();
            t2i_acc += (1.0 - codes.bit_disagreement(&g.codes)) / 2.0;
        }
        let e = &data.gen[8];
        let gcfg = GuidanceConfig { temperature: 1e-12, ..GuidanceConfig::edit_default() };
        let codes = pipe.edit_codes(e.reference.as_ref().unwrap(), "invert colors", &e.schedule, &gcfg, 1).unwrap();
        let edit_acc = 1.0 - codes.bit_disagreement(&e.codes);
        println!("step {:4}  loss {:.4}  ntp_eval {:.4}  nsp {:.4}  t2i_acc {:.4}  edit_acc {:.4}  [{:.0}s]",
            (chunk+1)*200, line.loss, ntp, line.nsp, t2i_acc, edit_acc, t0.elapsed().as_secs_f64());
        if ntp < 0.09 && t2i_acc > 0.995 && edit_acc > 0.99 { println!("converged early"); break; }
    }
}
