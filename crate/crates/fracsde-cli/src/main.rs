mod args;
mod run;

use clap::Parser;

fn main() {
    // worker-count override; reductions stay deterministic regardless
    if let Ok(threads) = std::env::var("FRACSDE_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
    let cli = args::Cli::parse();
    let code = run::dispatch(cli);
    std::process::exit(code);
}
