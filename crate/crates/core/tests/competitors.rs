use supremal::current::{make_current, make_pair, CurrentTuple};
use supremal::diagnostics::{exact_form_bank, local_mass_comparison, stream_competitor, TestFieldBank};
use supremal::mesh::{build_mesh, DomainSpec, NodalField, TriMesh};

fn strip(h: f64) -> (TriMesh, CurrentTuple) {
    let m = build_mesh(&DomainSpec::unit_square(h)).unwrap();
    let u = NodalField::from_fn(&m, 1, |x| vec![x[0]]).unwrap();
    let pair = make_pair(&m, &u, 64.0, 1.0).unwrap();
    let t = make_current(&m, &pair, 1.0).unwrap();
    (m, t)
}

fn hex_norm(dx: f64, dy: f64) -> f64 {
    dx.abs().max(dy.abs()).max((dx - dy).abs())
}

/// Mass of `T + curl psi` on the hexagon for the pyramid of height `k s`.
fn hexagon_mass(s: f64, k: f64) -> f64 {
    let r = |a: f64, b: f64| a.hypot(b);
    0.5 * s * s * (2.0 * r(1.0, k) + (1.0 - k).abs() + (1.0 + k) + r(1.0 - k, k) + r(1.0 + k, k))
}

#[test]
fn hexagon_pyramid_competitor_matches_closed_form() {
    let h = 0.05;
    let (m, t) = strip(h);
    let centre = [0.5, 0.5];
    for (rings, k) in [(1.0, 0.3), (2.0, 0.5), (3.0, 0.9), (2.0, 1.5)] {
        let s = rings * h;
        let psi = NodalField::from_fn(&m, 1, |x| {
            vec![k * s * (1.0 - hex_norm(x[0] - centre[0], x[1] - centre[1]) / s).max(0.0)]
        })
        .unwrap();
        let sc = stream_competitor(&m, &t, &psi).unwrap();
        let hex: Vec<usize> = (0..m.n_cells())
            .filter(|&c| {
                let b = m.barycentres[c];
                hex_norm(b[0] - centre[0], b[1] - centre[1]) < s
            })
            .collect();
        let (mt, ms) = (t.mass_of(&hex), sc.mass_of(&hex));
        assert!((mt - 3.0 * s * s).abs() < 1e-12, "T mass {mt} vs {}", 3.0 * s * s);
        let want = hexagon_mass(s, k);
        assert!((ms - want).abs() < 1e-12, "rings {rings}, k {k}: {ms} vs {want}");
        assert!(ms > mt);
        let outside: Vec<usize> = (0..m.n_cells()).filter(|c| !hex.contains(c)).collect();
        assert!((t.mass_of(&outside) - sc.mass_of(&outside)).abs() < 1e-12);
    }
}

#[test]
fn competitor_boundary_and_forms_agree() {
    let (m, t) = strip(0.05);
    let bank = TestFieldBank::standard(&m, 4).unwrap();
    let forms = exact_form_bank(&m, &bank, 1, 16).unwrap();
    let b = bank.bumps[0];
    let psi = NodalField::from_fn(&m, 1, |x| vec![0.2 * b.scale * b.value(x)]).unwrap();
    let sc = stream_competitor(&m, &t, &psi).unwrap();
    let k: Vec<usize> = (0..m.n_cells())
        .filter(|&c| m.triangles[c].iter().any(|&v| psi.at(v)[0] != 0.0))
        .collect();
    let cmp = local_mass_comparison(&m, &t, &k, &sc, &forms, 1e-12).unwrap();
    assert!(cmp.holds && cmp.mass_s > cmp.mass_t);
    assert!(cmp.max_mismatch < 1e-12);
}
