mod support;

fn run(check: support::Check) {
    match check {
        Ok(detail) => println!("{detail}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn block_math() {
    run(support::block_math_suite());
}

#[test]
fn gradients_match_finite_differences() {
    run(support::gradient_suite());
}

#[test]
fn losses_match_scalar_oracles() {
    run(support::oracle_suite());
}

#[test]
fn max_aggregation_properties() {
    run(support::aggregation_suite());
}
