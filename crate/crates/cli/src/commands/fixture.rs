use p3d_core::fixtures::{
    write_correspondence_fixture, write_probe_fixture, write_semantic_fixture, ProbeFixtureConfig,
    SemanticFixtureConfig,
};
use p3d_core::synthetic::MirrorSceneConfig;

use super::{out_dir, seed};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::{Common, FixtureArgs, FixtureKind};

pub fn run(args: &FixtureArgs, common: &Common, cfg: &RunConfig) -> CliResult {
    let out = out_dir(common, cfg)?;
    let seed = seed(common, cfg);
    let manifest = match args.kind {
        FixtureKind::Probe => {
            let mut c = ProbeFixtureConfig {
                train: args.train,
                test: args.test,
                ..Default::default()
            };
            c.scene.seed = seed;
            write_probe_fixture(&out, &c)?
        }
        FixtureKind::Correspondence => write_correspondence_fixture(
            &out,
            &MirrorSceneConfig {
                seed,
                ..Default::default()
            },
        )?,
        FixtureKind::Semantic => {
            let mut c = SemanticFixtureConfig {
                pairs_per_class: args.pairs_per_class,
                ..Default::default()
            };
            c.scene.seed = seed;
            write_semantic_fixture(&out, &c)?
        }
    };
    println!("{}", manifest.display());
    Ok(())
}
