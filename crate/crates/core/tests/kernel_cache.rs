use std::fs;

use torus_schrodinger::kernel::cache::{path_for, CacheKey};
use torus_schrodinger::kernel::default_substeps;
use torus_schrodinger::potential::TrigTerm;
use torus_schrodinger::{KernelFactory, KernelMethod, KernelOptions, PotentialSpec, TorusGrid};

fn factory(dir: &std::path::Path, method: KernelMethod) -> (KernelFactory, PotentialSpec) {
    let grid = TorusGrid::new(1, 1.0, 16).unwrap();
    let v = PotentialSpec::trigonometric(vec![TrigTerm {
        alpha: 1.0,
        beta: 0.3,
        omega: 0.0,
    }])
    .unwrap();
    let options = KernelOptions {
        method,
        cache_dir: Some(dir.to_path_buf()),
        ..KernelOptions::default()
    };
    (KernelFactory::new(grid, v.clone(), options).unwrap(), v)
}

#[test]
fn cached_kernels_are_reused_and_corrupt_files_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let (f, _) = factory(dir.path(), KernelMethod::Dense);
    let fresh = f.kernel(0.25).unwrap();
    let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 1);

    let (g, _) = factory(dir.path(), KernelMethod::Dense);
    assert_eq!(*g.kernel(0.25).unwrap(), *fresh);

    let path = files[0].as_ref().unwrap().path();
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x10;
    fs::write(&path, &bytes).unwrap();
    let (h, _) = factory(dir.path(), KernelMethod::Dense);
    assert_eq!(*h.kernel(0.25).unwrap(), *fresh);
    // The rebuilt kernel replaced the damaged file.
    let (i, _) = factory(dir.path(), KernelMethod::Dense);
    assert_eq!(*i.kernel(0.25).unwrap(), *fresh);
    assert_ne!(fs::read(&path).unwrap(), bytes);
}

#[test]
fn file_names_follow_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let (f, v) = factory(dir.path(), KernelMethod::CrankNicolson);
    f.kernel(0.1).unwrap();
    let grid = *f.grid();
    let key = CacheKey::new(
        &grid,
        &v,
        0.1,
        default_substeps(&grid, 0.1),
        f.options().stencil,
        KernelMethod::CrankNicolson,
    );
    assert!(path_for(dir.path(), &key).exists());
}
