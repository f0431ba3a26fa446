use stampgen_acceptance::desk::{run_desk, DeskSettings};

fn main() {
    let r = run_desk(&DeskSettings::default()).unwrap();
    println!("{r:#?}");
    println!("kid full {} no_fm {}", r.kid_full(), r.kid_no_fm());
}
