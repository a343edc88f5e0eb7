use clap::Args;

use crate::config::RunConfig;
use crate::fixtures::generate;
use crate::output::Output;
use crate::prune::toy_error;
use crate::viz::resolve_grid;

#[derive(Args, Debug)]
pub struct GenFixturesArgs {
    /// Toy model visual token count.
    #[arg(long)]
    pub lv: Option<usize>,
    /// Response tokens generated and included in the decoder dumps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Patch grid as HxW; defaults to square.
    #[arg(long)]
    pub grid: Option<String>,
}

pub fn run(args: &GenFixturesArgs, cfg: &RunConfig, out: &Output) -> anyhow::Result<()> {
    let mut toy = cfg.toy.clone();
    toy.seed = cfg.seed;
    if let Some(lv) = args.lv {
        toy.visual_tokens = lv;
    }
    toy.validate().map_err(toy_error)?;
    let grid = resolve_grid(args.grid.as_deref(), cfg, toy.visual_tokens)?;
    if grid.0 * grid.1 != toy.visual_tokens {
        return Err(crate::config::usage(format!(
            "grid {}x{} does not cover {} visual tokens",
            grid.0, grid.1, toy.visual_tokens
        )));
    }
    let mut prompt = cfg.prompt.clone();
    if let Some(steps) = args.steps {
        prompt.steps = steps;
    }
    let manifest = generate(out.dir(), toy, &prompt, grid)?;
    out.say(format!(
        "wrote fixtures for seed {} ({} visual tokens, {} decoder layers) to {}",
        manifest.seed,
        manifest.layout.visual,
        manifest.decoder_attention.len(),
        out.dir().display()
    ));
    Ok(())
}
