//! Published hyper-parameter rows as training configs, printed as TOML.

use segpl::presets::PUBLISHED_PRESETS;
use segpl::trainer::Mode;

fn main() {
    for p in PUBLISHED_PRESETS {
        println!("# {}", p.name);
        println!("{}", p.config(Mode::SegplVi).to_toml_string());
    }
}
