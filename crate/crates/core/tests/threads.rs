//! `VTC_THREADS` caps the bench worker pool. Kept in its own binary because
//! it mutates the process environment.

use vitkit::bench::pool_size;

#[test]
fn env_var_caps_the_pool() {
    std::env::remove_var("VTC_THREADS");
    assert!(pool_size(3) >= 3);
    std::env::set_var("VTC_THREADS", "1");
    assert_eq!(pool_size(4), 1);
    std::env::set_var("VTC_THREADS", "not a number");
    assert!(pool_size(3) >= 3);
    std::env::remove_var("VTC_THREADS");
}
