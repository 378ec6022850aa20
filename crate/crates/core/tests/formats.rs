use sadl::data::netpbm::{decode_pgm, decode_pgm_strict, decode_ppm, encode_pgm, encode_ppm};
use sadl::image::{ImageRgb, Mask};
use sadl::tensor::Tensor;
use sadl::train::Checkpoint;

#[test]
fn ppm_golden_bytes() {
    // 2x1: red, (0.5, 0.25, 1.0)
    let img = ImageRgb::new(1, 2, vec![1.0, 0.5, 0.0, 0.25, 0.0, 1.0]).unwrap();
    let mut expect = b"P6\n2 1\n255\n".to_vec();
    expect.extend([255, 0, 0, 128, 64, 255]);
    assert_eq!(encode_ppm(&img), expect);
}

#[test]
fn pgm_golden_bytes() {
    let m = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    let mut expect = b"P5\n2 2\n255\n".to_vec();
    expect.extend([0, 255, 255, 0]);
    assert_eq!(encode_pgm(&m), expect);
}

#[test]
fn header_comments_and_low_maxval() {
    let bytes = b"P5\n# mask\n3 1\n# max\n1\n\x00\x01\x01";
    let m = decode_pgm(bytes).unwrap();
    assert_eq!(m.data(), &[0, 1, 1]);
    let bytes = b"P6 1 1 15\n\x0f\x00\x05";
    let img = decode_ppm(bytes).unwrap();
    assert_eq!(img.pixel(0, 0), [1.0, 0.0, 1.0 / 3.0]);
}

#[test]
fn malformed_netpbm_is_rejected() {
    assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
    assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    assert!(decode_pgm(b"P5\n1 1\n256\n\x00").is_err());
    assert!(decode_pgm(b"P5\n1").is_err());
    assert!(decode_pgm_strict(b"P5\n2 1\n255\n\x00\x07").is_err());
}

#[test]
fn checkpoint_byte_layout() {
    let mut ck = Checkpoint {
        tensors: vec![("ab".into(), Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap())],
        ..Checkpoint::default()
    };
    ck.metadata.insert("k".into(), "v".into());
    let mut expect = b"SADL".to_vec();
    expect.extend(1u32.to_le_bytes());
    expect.extend(1u32.to_le_bytes());
    expect.extend(2u16.to_le_bytes());
    expect.extend(b"ab");
    expect.push(2);
    expect.extend(1u32.to_le_bytes());
    expect.extend(2u32.to_le_bytes());
    expect.extend(1.0f32.to_le_bytes());
    expect.extend((-2.0f32).to_le_bytes());
    expect.extend(b"k=v\n");
    assert_eq!(ck.to_bytes().unwrap(), expect);
}

#[test]
fn corrupted_checkpoints_fail_loudly() {
    let ck = Checkpoint {
        tensors: vec![("w".into(), Tensor::vector(vec![0.5; 4]))],
        ..Checkpoint::default()
    };
    let bytes = ck.to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
