//! Cross-module invariants over randomly generated traffic and tensors.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};

use netml_core::capture::{craft_packet, write_capture, CaptureHeader, FiveTuple, PacketSpec, Resolution, LINKTYPE_ETHERNET};
use netml_core::dataset::{class_stats, prepare, LabelManifest, Level, ManifestEntry, PrepareConfig};
use netml_core::eval::ConfusionMatrix;
use netml_core::features::{serialize_record, FlowRecord};
use netml_core::flow::FlowConfig;
use netml_core::nn::{conv_out_len, softmax, Conv1d, Layer, Tensor};
use netml_core::pipeline::extract_capture;
use proptest::prelude::*;
use rand::SeedableRng;

const PORTS: [u16; 5] = [443, 53, 80, 8080, 9000];
const FLAGS: [u8; 5] = [0x10, 0x18, 0x02, 0x11, 0x04];

/// (flow, reverse, payload length, gap in µs, flag choice)
type Pkt = (usize, bool, usize, u32, usize);

fn packets() -> impl Strategy<Value = Vec<Pkt>> {
    prop::collection::vec((0usize..8, any::<bool>(), 0usize..700, 0u32..2_000_000, 0usize..5), 1..80)
}

fn flow_tuple(f: usize) -> FiveTuple {
    FiveTuple {
        src_addr: IpAddr::V4(Ipv4Addr::new(10, 1, 0, f as u8 + 1)),
        dst_addr: IpAddr::V4(Ipv4Addr::new(10, 2, 0, f as u8 + 1)),
        src_port: 20000 + f as u16,
        dst_port: PORTS[f % PORTS.len()],
        proto: 0,
    }
}

fn build(pkts: &[Pkt]) -> Vec<u8> {
    let mut t_us: u64 = 0;
    let mut specs = Vec::new();
    for (i, &(f, rev, len, gap, fl)) in pkts.iter().enumerate() {
        t_us += gap as u64;
        let t = if rev { flow_tuple(f).reversed() } else { flow_tuple(f) };
        let payload: Vec<u8> = (0..len).map(|j| (j * 31 + i * 7) as u8).collect();
        let (s, us) = ((t_us / 1_000_000) as u32, (t_us % 1_000_000) as u32);
        // odd flows are UDP
        specs.push(if f % 2 == 1 { PacketSpec::udp(t, &payload, s, us) } else { PacketSpec::tcp(t, FLAGS[fl], &payload, s, us) });
    }
    let raw: Vec<_> = specs.iter().map(|s| craft_packet(s).unwrap()).collect();
    write_capture(&CaptureHeader::new(LINKTYPE_ETHERNET, Resolution::Micros), &raw)
}

fn literals(recs: &[FlowRecord]) -> Vec<String> {
    let mut v: Vec<String> = recs.iter().flat_map(|r| [r.sa.clone(), r.da.clone()]).collect();
    v.sort();
    v.dedup();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn record_shape_and_histogram_mass(pkts in packets()) {
        let bytes = build(&pkts);
        let (recs, summary) = extract_capture(&bytes, "p.pcap", FlowConfig::default()).unwrap();
        prop_assert_eq!(summary.counts.flows as usize, recs.len());
        prop_assert_eq!(summary.counts.metadata, summary.counts.flows);
        for (n, present) in [
            (summary.counts.tls, recs.iter().filter(|r| r.tls.is_some()).count()),
            (summary.counts.dns, recs.iter().filter(|r| r.dns.is_some()).count()),
            (summary.counts.http, recs.iter().filter(|r| r.http.is_some()).count()),
        ] {
            prop_assert_eq!(n as usize, present);
            prop_assert!(n <= summary.counts.flows);
        }
        let mut stored = 0;
        for r in &recs {
            let m = &r.metadata;
            prop_assert_eq!(m.to_columns().len(), 121);
            prop_assert!(m.num_pkts_in <= 48 && m.num_pkts_out <= 48);
            prop_assert_eq!(m.pld_ccnt.iter().sum::<u64>(), m.num_pkts_in);
            prop_assert_eq!(m.rev_pld_ccnt.iter().sum::<u64>(), m.num_pkts_out);
            prop_assert_eq!(m.hdr_ccnt.iter().sum::<u64>(), m.num_pkts_in);
            prop_assert_eq!(m.rev_hdr_ccnt.iter().sum::<u64>(), m.num_pkts_out);
            prop_assert_eq!(m.intervals_ccnt.iter().sum::<u64>(), m.num_pkts_in.saturating_sub(1));
            prop_assert_eq!(m.rev_intervals_ccnt.iter().sum::<u64>(), m.num_pkts_out.saturating_sub(1));
            prop_assert!(m.time_length >= 0.0);
            stored += m.num_pkts_in + m.num_pkts_out;
        }
        prop_assert!(stored <= summary.decoded);

        let (again, _) = extract_capture(&bytes, "p.pcap", FlowConfig::default()).unwrap();
        let a: Vec<String> = recs.iter().map(serialize_record).collect();
        let b: Vec<String> = again.iter().map(serialize_record).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn prepared_output_is_masked_partitioned_and_conserves_counts(
        a in packets(), b in packets(), seed in 0u64..1000,
    ) {
        let mut recs = extract_capture(&build(&a), "alpha.pcap", FlowConfig::default()).unwrap().0;
        recs.extend(extract_capture(&build(&b), "beta.pcap", FlowConfig::default()).unwrap().0);
        let lits = literals(&recs);
        let manifest = LabelManifest {
            entries: vec![
                ManifestEntry { pattern: "alpha*".into(), dataset: None, top: "T0".into(), mid: "M0".into(), fine: None },
                ManifestEntry { pattern: "beta*".into(), dataset: None, top: "T1".into(), mid: "M1".into(), fine: None },
            ],
            vocabulary: None,
        };
        let mut expected = BTreeMap::new();
        for level in [Level::Top, Level::Mid] {
            let mut labeled = recs.clone();
            netml_core::dataset::assign_labels(&mut labeled, &manifest).unwrap();
            expected.insert(level, class_stats(&labeled, level).unwrap());
        }
        let n = recs.len();
        let p = prepare(recs, &manifest, &PrepareConfig { salt: b"s".to_vec(), seed, ratio: [8, 1, 1] }).unwrap();

        let ids: Vec<u64> = (0..n as u64).collect();
        prop_assert!(p.split.is_partition_of(&ids));
        let mut all = p.train.clone();
        for (r, w) in p.test_std.iter().chain(&p.test_challenge).zip(p.withheld_std.iter().chain(&p.withheld_challenge)) {
            prop_assert_eq!(r.id, w.id);
            let mut r = r.clone();
            r.labels = Some(w.labels.clone());
            all.push(r);
        }
        for level in [Level::Top, Level::Mid] {
            prop_assert_eq!(&class_stats(&all, level).unwrap(), &expected[&level]);
        }
        for r in p.train.iter().chain(&p.test_std).chain(&p.test_challenge) {
            let line = serialize_record(r);
            prop_assert!(line.contains("\"time_length\":"));
            prop_assert!(!line.contains("time_start") && !line.contains("time_end"));
            for l in &lits {
                let quoted = format!("\"{l}\"");
                prop_assert!(!line.contains(&quoted), "{} leaked", l);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, vals in prop::collection::vec(-60.0f64..60.0, 48)) {
        let data: Vec<f64> = (0..rows * cols).map(|i| vals[i % vals.len()] * (1.0 + i as f64 / 7.0)).collect();
        let p = softmax(&Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        for row in p.data.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn true_positives_sum_to_trace(pairs in prop::collection::vec((0usize..5, 0usize..5), 0..60)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_indices(&t, &p, (0..5).map(|i| format!("c{i}")).collect()).unwrap();
        prop_assert_eq!(cm.per_class().iter().map(|c| c.true_positives).sum::<u64>(), cm.trace());
        prop_assert_eq!(cm.total(), t.len() as u64);
        let f = cm.macro_f1();
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn conv_length_algebra(len in 1usize..40, k in 1usize..6, s in 1usize..4, p in 0usize..3, seed in 0u64..100) {
        prop_assume!(len + 2 * p >= k);
        let expected = (len + 2 * p - k) / s + 1;
        prop_assert_eq!(conv_out_len(len, k, s, p), Some(expected));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c = Conv1d::<f64>::new(k, s, p, 2, 3, &mut rng);
        let y = c.forward(&Tensor::zeros(vec![1, len, 2]), false).unwrap();
        prop_assert_eq!(y.shape, vec![1, expected, 3]);
    }
}
