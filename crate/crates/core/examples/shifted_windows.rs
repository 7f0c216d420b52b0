//! Window partition of a patch grid and the masks of shifted windows.

use pear::hpx::GridSpec;
use pear::window::WindowLayout;

fn main() -> pear::Result<()> {
    let spec = GridSpec::from_nside(2)?;
    for shifted in [false, true] {
        let layout = WindowLayout::new(spec, 8, 4, 2, shifted)?;
        let multi = (0..layout.n_windows()).filter(|&w| layout.region_count(w) > 1).count();
        println!(
            "shifted {shifted}: {} windows of {} tokens, shift ({}, {}), {multi} windows with masked pairs",
            layout.n_windows(),
            layout.window_len(),
            layout.shift_hp(),
            layout.shift_d()
        );
    }

    let layout = WindowLayout::new(spec, 8, 4, 2, true)?;
    let w = (0..layout.n_windows()).max_by_key(|&w| layout.region_count(w)).unwrap_or(0);
    println!("\nwindow {w}, region labels {:?}", layout.window_regions(w));
    for row in layout.mask_grid(w) {
        println!("  {}", row.iter().map(|m| if *m != 0 { '#' } else { '.' }).collect::<String>());
    }
    Ok(())
}
