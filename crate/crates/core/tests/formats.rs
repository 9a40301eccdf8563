use mami_head::dataset::{self, Dataset, Label, LabelSet, LoadOptions, Sample, Split};
use mami_head::error::FormatError;
use mami_head::kernels::Tensor2;
use mami_head::model::{self, init_params, Dims, ModelParams, ParamGroup};
use mami_head::Error;

fn le32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn names_table(out: &mut Vec<u8>, names: &[&str]) {
    for n in names {
        le32(out, n.len() as u32);
        out.extend_from_slice(n.as_bytes());
    }
}

fn small_dataset() -> Dataset {
    let mut ds = Dataset::new(Split::Train, 3, 2);
    let rows = [
        ("a", vec![0.5f32, -1.0, 2.0], vec![1.0f32, 0.0], 0b00000u8),
        ("meme-β", vec![1.0, 2.0, 3.0, -0.25, 1e-7, f32::MAX], vec![-3.5, 7.0], 0b10011),
        ("c", vec![0.0, -0.0, 1.5], vec![f32::MIN_POSITIVE, 2.0], 0b00001),
    ];
    for (id, tok, img, lab) in rows {
        ds.samples.push(Sample {
            id: id.into(),
            tokens: Tensor2::from_vec(tok.len() / 3, 3, tok).unwrap(),
            image: img,
            labels: LabelSet::from_byte(lab).unwrap(),
        });
    }
    ds
}

/// Independent encoder written from the layout description.
fn hand_encode(ds: &Dataset) -> Vec<u8> {
    let mut out = b"MMEB".to_vec();
    le32(&mut out, 1);
    le32(&mut out, ds.token_dim as u32);
    le32(&mut out, ds.image_dim as u32);
    le32(&mut out, 5);
    names_table(&mut out, &["misogynous", "shaming", "stereotype", "objectification", "violence"]);
    out.extend_from_slice(&(ds.samples.len() as u64).to_le_bytes());
    for s in &ds.samples {
        let mut rec = Vec::new();
        le32(&mut rec, s.id.len() as u32);
        rec.extend_from_slice(s.id.as_bytes());
        le32(&mut rec, s.tokens.rows() as u32);
        for v in s.tokens.data() {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.image {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        let mut byte = 0u8;
        for (k, l) in Label::ALL.iter().enumerate() {
            if s.labels.get(*l) {
                byte |= 1 << k;
            }
        }
        rec.push(byte);
        let crc = crc32_reference(&rec);
        out.extend_from_slice(&rec);
        le32(&mut out, crc);
    }
    out
}

/// Bitwise CRC-32 (IEEE, reflected, init and xorout 0xFFFFFFFF).
fn crc32_reference(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn crc_reference_check_value() {
    assert_eq!(crc32_reference(b"123456789"), 0xCBF4_3926);
}

#[test]
fn dataset_bytes_match_hand_encoding() {
    let ds = small_dataset();
    let hand = hand_encode(&ds);
    assert_eq!(ds.to_bytes().unwrap(), hand);
    let back = dataset::from_bytes(&hand, &LoadOptions::default()).unwrap().dataset;
    assert_eq!(back, ds);
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tokens.data()), bits(b.tokens.data()));
        assert_eq!(bits(&a.image), bits(&b.image));
    }
}

#[test]
fn dataset_file_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.mmeb");
    let ds = small_dataset();
    ds.write(&p).unwrap();
    let back = dataset::load(&p).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    assert!(dataset::validate(&p, dataset::T_MAX).unwrap().is_clean());
}

fn record_spans(ds: &Dataset, bytes: &[u8]) -> Vec<(usize, usize)> {
    let header = 4 + 4 * 4 + Label::ALL.iter().map(|l| 4 + l.name().len()).sum::<usize>() + 8;
    let mut spans = Vec::new();
    let mut pos = header;
    for s in &ds.samples {
        let len = 4 + s.id.len() + 4 + 4 * (s.tokens.data().len() + s.image.len()) + 1 + 4;
        spans.push((pos, pos + len));
        pos += len;
    }
    assert_eq!(pos, bytes.len());
    spans
}

#[test]
fn every_single_byte_dataset_corruption_is_rejected() {
    let ds = small_dataset();
    let bytes = ds.to_bytes().unwrap();
    let spans = record_spans(&ds, &bytes);
    for pos in 0..bytes.len() {
        for mask in 1..=255u8 {
            let mut bad = bytes.clone();
            bad[pos] ^= mask;
            let res = dataset::from_bytes(&bad, &LoadOptions::default());
            let err = res.err().unwrap_or_else(|| panic!("byte {pos} ^ {mask:#04x} accepted"));
            // past a record's two length fields every change is caught by its CRC
            if let Some((r, &(start, _))) = spans.iter().enumerate().find(|(_, (s, e))| (*s..*e).contains(&pos)) {
                let id_len = ds.samples[r].id.len();
                let id_end = start + 4 + id_len;
                let framing = (start..start + 4).contains(&pos) || (id_end..id_end + 4).contains(&pos);
                if !framing {
                    assert!(
                        matches!(
                            err,
                            Error::Format {
                                record: Some(i),
                                source: FormatError::Checksum { .. }
                            } if i == r
                        ),
                        "byte {pos} ^ {mask:#04x}: {err}"
                    );
                }
            }
        }
    }
}

#[test]
fn validate_reports_checksum_with_record_index() {
    let ds = small_dataset();
    let mut bytes = ds.to_bytes().unwrap();
    let (start, end) = record_spans(&ds, &bytes)[1];
    bytes[(start + end) / 2] ^= 0x40;
    let report = dataset::validate_bytes(&bytes, dataset::T_MAX);
    assert_eq!(report.findings.len(), 1);
    assert_eq!(report.findings[0].record, Some(1));
    assert_eq!(report.records_checked, 3);
}

fn tiny_dims() -> Dims {
    Dims {
        token_dim: 3,
        image_dim: 2,
        hidden: 2,
        fused: 3,
        n_subclasses: 4,
    }
}

fn hand_encode_params(p: &ModelParams<f32>) -> Vec<u8> {
    let d = p.dims();
    let mut out = b"TVA1".to_vec();
    for v in [1, d.token_dim, d.image_dim, d.hidden, d.fused, d.n_subclasses] {
        le32(&mut out, v as u32);
    }
    names_table(&mut out, &["shaming", "stereotype", "objectification", "violence"]);
    let order = [
        ParamGroup::LstmWeight,
        ParamGroup::LstmBias,
        ParamGroup::ImageWeight,
        ParamGroup::ImageBias,
        ParamGroup::FusedWeight,
        ParamGroup::FusedBias,
        ParamGroup::HeadAWeight,
        ParamGroup::HeadABias,
        ParamGroup::HeadBWeight,
        ParamGroup::HeadBBias,
    ];
    assert_eq!(order, ParamGroup::ALL);
    for g in order {
        for v in p.group(g) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32_reference(&out);
    le32(&mut out, crc);
    out
}

#[test]
fn params_bytes_match_hand_encoding_and_round_trip() {
    let p: ModelParams<f32> = init_params(5, tiny_dims()).unwrap();
    let bytes = p.to_bytes();
    assert_eq!(bytes, hand_encode_params(&p));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.tva");
    model::save_params(&p, &path).unwrap();
    let back = model::load_params(&path).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn every_single_byte_params_corruption_is_rejected() {
    let p: ModelParams<f32> = init_params(6, tiny_dims()).unwrap();
    let bytes = p.to_bytes();
    let payload_start = 4 + 6 * 4 + Label::SUBCLASSES.iter().map(|l| 4 + l.name().len()).sum::<usize>();
    for pos in 0..bytes.len() {
        for mask in 1..=255u8 {
            let mut bad = bytes.clone();
            bad[pos] ^= mask;
            let err = ModelParams::from_bytes(&bad)
                .err()
                .unwrap_or_else(|| panic!("byte {pos} ^ {mask:#04x} accepted"));
            if pos >= payload_start {
                assert!(
                    matches!(
                        err,
                        Error::Format {
                            source: FormatError::Checksum { .. },
                            ..
                        }
                    ),
                    "byte {pos} ^ {mask:#04x}: {err}"
                );
            }
        }
    }
}

#[test]
fn checkpoint_for_other_hidden_size_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.tva");
    let p: ModelParams<f32> = init_params(1, Dims { hidden: 3, ..tiny_dims() }).unwrap();
    model::save_params(&p, &path).unwrap();
    assert!(matches!(model::load_params_expecting(&path, &tiny_dims()), Err(Error::Dims(_))));
}
