use std::process::Command;

fn drift(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_drift"))
        .args(args)
        .output()
        .unwrap();
    (out.status.success(), String::from_utf8(out.stdout).unwrap())
}

#[test]
fn equilibrium_table() {
    let (ok, text) = drift(&["equilibrium", "--radius", "20:45:6"]);
    assert!(ok);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "R,V,beta,r,delta,Fxr,alpha_r,residual");
    assert_eq!(lines.len(), 7);
    for line in &lines[1..] {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cols[1] - cols[0] * cols[3]).abs() < 1e-6);
        assert!(cols[7] < 1e-8);
    }
}

#[test]
fn defaults_print_as_json() {
    let (ok, text) = drift(&["simulate", "--print-defaults"]);
    assert!(ok);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["laps"], 6);
    assert_eq!(v["controller"]["N"], 20);
}

#[test]
fn single_solve_reports_diagnostics() {
    let (ok, text) = drift(&["solve-ocp", "--state", "16,-0.9,0.8"]);
    assert!(ok);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["diagnostics"]["admm_iters"].as_u64().unwrap() >= 1);
    assert!(v["control"]["Fxr"].as_f64().unwrap() >= 0.0);
}

#[test]
fn bad_state_fails() {
    let (ok, _) = drift(&["solve-ocp", "--state", "16,-0.9"]);
    assert!(!ok);
}
