// Embeds an rpath to the libtorch shared objects so test and doc-test
// binaries run without LD_LIBRARY_PATH.
fn main() {
    println!("cargo:rerun-if-env-changed=LIBTORCH");
    let dir = match std::env::var("LIBTORCH") {
        Ok(root) => format!("{root}/lib"),
        Err(_) => {
            let out = std::process::Command::new("python3")
                .args([
                    "-c",
                    "import os, torch; print(os.path.join(os.path.dirname(torch.__file__), 'lib'))",
                ])
                .output();
            match out {
                Ok(out) if out.status.success() => String::from_utf8_lossy(&out.stdout).trim().to_string(),
                _ => return,
            }
        }
    };
    println!("cargo:rustc-link-arg=-Wl,-rpath,{dir}");
}
