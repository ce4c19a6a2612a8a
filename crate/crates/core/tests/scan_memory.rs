use gestor_core::alloc::{self, CountingAlloc};
use gestor_core::bench::{measure_kernel, random_head};
use gestor_core::ssd::ScanForm;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

const S: usize = 16;
const D: usize = 16;

#[test]
fn linear_scan_peak_is_linear_in_length() {
    let mut peaks = vec![];
    for t in [1024, 2048, 4096] {
        let (p, v) = random_head::<f32>(t, S, D, 0).unwrap();
        let s = measure_kernel(ScanForm::Linear, &p, &v, D, 1).unwrap();
        // Output buffer plus an S×D state and a D accumulator, nothing T×T.
        let expected = t * D * 4 + S * D * 8 + D * 8;
        assert!(s.peak_bytes <= expected + 1024, "T={t}: {} > {expected}", s.peak_bytes);
        peaks.push(s.peak_bytes);
    }
    assert!(alloc::is_installed());
    assert!(peaks[2] < 5 * peaks[0]);
}

#[test]
fn quadratic_form_allocates_the_score_buffer() {
    let t = 1024;
    let (p, v) = random_head::<f32>(t, S, D, 0).unwrap();
    let s = measure_kernel(ScanForm::Quadratic, &p, &v, D, 1).unwrap();
    assert!(s.peak_bytes >= t * t * 4, "{}", s.peak_bytes);
}
