//! Regenerates the workspace `fixtures/` corpus. Run from the workspace
//! root: `cargo run -p portrait-cli --example make_fixtures`.

use std::fs;
use std::path::Path;

use portrait_cli::config::canonical;
use portrait_cli::pipeline::PipelineRunConfig;
use portrait_core::diffusion::SamplerKind;
use portrait_core::image::save_image;
use portrait_core::synth::{face_mask, image_oracle, portrait, splice, Identity, Lighting};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new("fixtures");
    for dir in ["portraits", "masks", "pipeline"] {
        fs::create_dir_all(root.join(dir))?;
    }

    let ids = [("alice", Identity::alice()), ("bob", Identity::bob()), ("carol", Identity::carol())];
    let lights = [
        ("left", Lighting::left()),
        ("right_warm", Lighting::right_warm()),
        ("top_cool", Lighting::top_cool()),
    ];
    for (name, id) in &ids {
        for (lname, light) in &lights {
            save_image(&portrait(64, 64, 3, id, light)?, &root.join(format!("portraits/{name}_{lname}.png")))?;
        }
        save_image(&face_mask(64, 64, id)?.to_image(), &root.join(format!("masks/{name}_face.pgm")))?;
    }

    // Pipeline run: bob's portrait is the reference, alice's face is the
    // source identity, both under the reference lighting.
    let (h, w) = (32, 32);
    let light = Lighting::right_warm();
    let reference = portrait(h, w, 3, &Identity::bob(), &light)?;
    let source = portrait(h, w, 3, &Identity::alice(), &light)?;
    let mask = face_mask(h, w, &Identity::bob())?;
    let swapped = splice(&reference, &source, &mask)?;
    let model = image_oracle(&[reference.clone(), swapped], 0.002, &[("ref", 0), ("src", 1)])?;

    let dir = root.join("pipeline");
    save_image(&reference, &dir.join("reference.png"))?;
    save_image(&source, &dir.join("source.png"))?;
    save_image(&mask.to_image(), &dir.join("face_mask.pgm"))?;
    fs::write(dir.join("model.json"), serde_json::to_string(&model.to_spec())?)?;

    let cfg = PipelineRunConfig {
        reference: dir.join("reference.png"),
        source: Some(dir.join("source.png")),
        face_mask_path: dir.join("face_mask.pgm"),
        model_path: dir.join("model.json"),
        out_dir: "run".into(),
        identity_condition: Some("src".into()),
        harmonize_condition: Some("src".into()),
        sampler: SamplerKind::Ddim,
        sigma_low: 4.0,
        ..PipelineRunConfig::default()
    };
    fs::write(dir.join("config.json"), canonical(&cfg))?;
    Ok(())
}
