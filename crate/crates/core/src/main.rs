// SPDX-License-Identifier: Apache-2.0

fn main() {
    let code = qlink::cli::main_with_args(
        std::env::args_os(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
