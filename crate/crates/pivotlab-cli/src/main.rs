use std::io::Write;

fn main() {
    let env_seed = std::env::var(pivotlab_cli::SEED_ENV).ok();
    let out = pivotlab_cli::run(std::env::args_os(), env_seed.as_deref());
    std::io::stdout().write_all(out.stdout.as_bytes()).expect("stdout");
    std::io::stderr().write_all(out.stderr.as_bytes()).expect("stderr");
    std::process::exit(out.code);
}
