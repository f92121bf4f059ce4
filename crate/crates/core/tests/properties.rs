mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use invoicegrid::corpus::document_seed;
use invoicegrid::docmodel::{
    iou, overlap_fraction, validate_annotation, BBox, DocumentAnnotation, FieldInstance,
    FieldLabel, PageSize, Word,
};
use invoicegrid::evaluate::{assigned_words, components};
use invoicegrid::gridify::{
    build_chargrid, build_wordgrid, to_cell, Grid, GridConfig, GridData, HashedEmbedding,
    BACKGROUND, VOCAB_SIZE,
};
use invoicegrid::layout::{instantiate, ElementKind, Template};
use invoicegrid::recordgen::{synth_record, Lexicons};
use invoicegrid::render::emit_pdf;
use invoicegrid::targets::{
    box_targets_gt, encode_boxes, rasterize_semantic, AnchorSet, FieldSchema,
};
use invoicegrid::tensorio::{decode, encode};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..500.0f64, 0.0..700.0f64, 0.1..90.0f64, 0.1..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn word_text() -> impl Strategy<Value = String> {
    "[!-~€äöüß]{1,12}"
}

fn words_on_page() -> impl Strategy<Value = Vec<Word>> {
    prop::collection::vec((word_text(), bbox()), 0..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (text, bbox))| Word {
                text,
                bbox,
                reading_order: i as u32,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn contained_word_has_full_overlap(r in bbox(), fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.01..1.0f64, fh in 0.01..1.0f64) {
        let x0 = r.x0() + fx * r.width() * (1.0 - fw);
        let y0 = r.y0() + fy * r.height() * (1.0 - fh);
        let w = BBox::new(x0, y0, x0 + fw * r.width(), y0 + fh * r.height()).unwrap();
        prop_assume!(r.contains(&w));
        prop_assert_eq!(overlap_fraction(&w, &r), 1.0);
    }

    #[test]
    fn annotation_json_round_trip(
        words in words_on_page(),
        seed in any::<u64>(),
        label_idx in 0usize..8,
        value in "[ -~]{0,20}",
    ) {
        let label = FieldLabel::from_index(label_idx).unwrap();
        let boxes: Vec<BBox> = words.iter().take(2).map(|w| w.bbox).collect();
        let doc = DocumentAnnotation {
            doc_id: format!("d{seed}"),
            page: PageSize::A4,
            template_id: "t".into(),
            seed,
            words,
            fields: vec![FieldInstance {
                label,
                value,
                row: label.is_line_item().then_some(3),
                boxes,
            }],
        };
        let back = DocumentAnnotation::from_json(&doc.to_json()).unwrap();
        prop_assert_eq!(back, doc);
    }

    #[test]
    fn chargrid_cells_equal_union_of_word_rects(words in words_on_page()) {
        let cfg = GridConfig::default();
        let g = build_chargrid(&words, PageSize::A4, &cfg);
        let data = g.as_u8().unwrap();
        prop_assert!(data.iter().all(|&v| (v as usize) < VOCAB_SIZE));
        let filled: BTreeSet<usize> = (0..data.len()).filter(|&i| data[i] != BACKGROUND).collect();
        let mut union = BTreeSet::new();
        for w in &words {
            let r = to_cell(&w.bbox, PageSize::A4, &cfg);
            prop_assert!(r.area() >= 1);
            for row in r.r0..r.r1 {
                for col in r.c0..r.c1 {
                    union.insert(row * cfg.width + col);
                }
            }
        }
        prop_assert_eq!(filled, union);
        // deterministic bytes
        prop_assert_eq!(encode(&g).unwrap(), encode(&build_chargrid(&words, PageSize::A4, &cfg)).unwrap());
    }

    #[test]
    fn wordgrid_background_zero_and_unit_norm(words in words_on_page()) {
        let cfg = GridConfig { height: 91, width: 64, embed_dim: 16 };
        let g = build_wordgrid(&words, PageSize::A4, &cfg, &HashedEmbedding { dim: 16 }).unwrap();
        let v = g.as_f32().unwrap();
        let chars = build_chargrid(&words, PageSize::A4, &cfg);
        for (cell, &c) in chars.as_u8().unwrap().iter().enumerate() {
            let e = &v[cell * 16..cell * 16 + 16];
            if c == BACKGROUND {
                prop_assert!(e.iter().all(|&x| x == 0.0));
            } else {
                let n: f64 = e.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
                prop_assert!((n.sqrt() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn threshold_monotone(words in words_on_page(), region in bbox(), hi in 0.01..1.0f64, frac in 0.0..1.0f64) {
        let lo = hi * frac;
        prop_assume!(lo > 0.0);
        let strict: BTreeSet<usize> = assigned_words(&region, &words, hi).into_iter().collect();
        let loose: BTreeSet<usize> = assigned_words(&region, &words, lo).into_iter().collect();
        prop_assert!(strict.is_subset(&loose));
    }
}

fn tensor() -> impl Strategy<Value = Grid> {
    prop::collection::vec(1usize..6, 0..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        let d1 = dims.clone();
        prop_oneof![
            prop::collection::vec(any::<u8>(), n).prop_map(move |v| Grid::from_parts(
                d1.clone(),
                GridData::U8(v)
            )
            .unwrap()),
            prop::collection::vec(-1e30f32..1e30f32, n).prop_map(move |v| Grid::from_parts(
                dims.clone(),
                GridData::F32(v)
            )
            .unwrap()),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tensor_round_trip(g in tensor()) {
        let bytes = encode(&g).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        prop_assert_eq!(back, g);
    }
}

fn class_mask() -> impl Strategy<Value = Grid> {
    (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u8..3, h * w)
            .prop_map(move |v| Grid::from_parts(vec![h, w], GridData::U8(v)).unwrap())
    })
}

/// Union-find labelling, used as an independent oracle for `components`.
fn oracle_components(
    mask: &Grid,
    class: u8,
    min_area: usize,
) -> Vec<(usize, usize, usize, usize, usize)> {
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let d = mask.as_u8().unwrap();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..h * w {
        if d[i] != class {
            continue;
        }
        let right = ((i % w) + 1 < w).then_some(i + 1);
        let down = (i + w < h * w).then_some(i + w);
        for j in right.into_iter().chain(down) {
            if d[j] == class {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &v) in d.iter().enumerate() {
        if v == class {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    let mut out: Vec<_> = groups
        .values()
        .filter(|g| g.len() >= min_area)
        .map(|g| {
            let r0 = g.iter().map(|i| i / w).min().unwrap();
            let r1 = g.iter().map(|i| i / w).max().unwrap() + 1;
            let c0 = g.iter().map(|i| i % w).min().unwrap();
            let c1 = g.iter().map(|i| i % w).max().unwrap() + 1;
            (r0, c0, r1, c1, g.len())
        })
        .collect();
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn components_match_union_find(mask in class_mask(), class in 0u8..3, min_area in 1usize..6) {
        let got = components(&mask, class, min_area);
        let mut got_t: Vec<_> = got.iter().map(|c| (c.rect.r0, c.rect.c0, c.rect.r1, c.rect.c1, c.cells)).collect();
        // output order is (top, left)
        let keys: Vec<_> = got.iter().map(|c| (c.rect.r0, c.rect.c0)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
        got_t.sort();
        prop_assert_eq!(got_t, oracle_components(&mask, class, min_area));
    }
}

#[test]
fn record_invariants_over_ten_thousand_seeds() {
    let lex = Lexicons::builtin();
    let mut sevens = 0;
    for i in 0..10_000u64 {
        let seed = document_seed(0xfeed, i);
        let r = synth_record(seed, &lex).unwrap();
        assert!(r.check().is_empty(), "seed {seed}: {:?}", r.check());
        let sum: i64 = r.line_items.iter().map(|it| it.amount.0).sum();
        assert_eq!(sum, r.invoice_amount.0);
        for it in &r.line_items {
            assert_eq!(it.amount.0, i64::from(it.quantity) * it.unit_price.0);
            assert!(it.quantity >= 1);
            if it.quantity.to_string().contains('7') {
                sevens += 1;
            }
        }
        let n = &r.invoice_number;
        assert!(
            n.len() == 10 && n.starts_with("INV-") && n[4..].bytes().all(|b| b.is_ascii_digit())
        );
        assert!((2..=3).contains(&r.company_address.len()));
        assert_eq!(r, synth_record(seed, &lex).unwrap());
    }
    assert!(sevens > 0);
}

#[test]
fn placements_stay_within_jitter_over_a_thousand_seeds() {
    let lex = Lexicons::builtin();
    let templates = Template::builtin();
    let mut multiline_address = BTreeSet::new();
    for i in 0..1000u64 {
        let seed = document_seed(99, i);
        let t = &templates[i as usize % templates.len()];
        let record = synth_record(seed, &lex).unwrap();
        let layout = instantiate(&record, t, seed).unwrap();
        for p in &layout.placed {
            let el = &t.elements[p.element];
            assert!(
                el.reach().contains(&p.bbox),
                "{} element {} seed {seed}",
                t.template_id,
                p.element
            );
            let (jx, jy) = (f64::from(el.jitter.dx_max), f64::from(el.jitter.dy_max));
            if !matches!(el.kind, ElementKind::Table { .. }) {
                let dx = p.bbox.x0() - el.anchor.x0();
                let dy = p.bbox.y0() - el.anchor.y0();
                // whole-point offsets within the jitter range
                assert!((dx - dx.round()).abs() < 1e-9 && (dy - dy.round()).abs() < 1e-9);
                assert!(
                    dx.round().abs() <= jx && dy.round().abs() <= jy,
                    "{} element {}: ({dx}, {dy})",
                    t.template_id,
                    p.element
                );
                assert!((p.bbox.width() - el.anchor.width()).abs() < 1e-9);
            }
        }
        let (_, ann) = emit_pdf(&layout, "d").unwrap();
        let v = validate_annotation(&ann);
        assert!(v.is_empty(), "{} seed {seed}: {}", t.template_id, v[0]);
        for f in ann
            .fields
            .iter()
            .filter(|f| f.label == FieldLabel::CompanyAddress)
        {
            if f.boxes.len() > 1 {
                multiline_address.insert(t.template_id.clone());
            }
        }
    }
    assert!(!multiline_address.is_empty());
}

#[test]
fn targets_agree_with_annotations() {
    let lex = Lexicons::builtin();
    let templates = Template::builtin();
    let cfg = GridConfig::default();
    let schema = FieldSchema::default();
    let anchors = AnchorSet::default();
    for i in 0..60u64 {
        let seed = document_seed(5, i);
        let t = &templates[i as usize % templates.len()];
        let layout = instantiate(&synth_record(seed, &lex).unwrap(), t, seed).unwrap();
        let (_, ann) = emit_pdf(&layout, "d").unwrap();

        let sem = rasterize_semantic(&ann.fields, ann.page, &cfg, &schema);
        let d = sem.as_u8().unwrap();
        for f in &ann.fields {
            let class = schema.index_of(f.label).unwrap();
            let (mut hit, mut total) = (0, 0);
            for b in &f.boxes {
                let r = to_cell(b, ann.page, &cfg);
                for row in r.r0..r.r1 {
                    for col in r.c0..r.c1 {
                        total += 1;
                        hit += usize::from(d[row * cfg.width + col] == class);
                    }
                }
            }
            assert!(
                hit as f64 >= 0.9 * total as f64,
                "{} in seed {seed}: {hit}/{total}",
                f.label
            );
        }

        // every line-item box has at least one foreground anchor
        let gt = box_targets_gt(&ann, &cfg);
        let t = encode_boxes(&gt, &anchors, cfg.height, cfg.width);
        let m = t.box_mask.as_u8().unwrap();
        let n = anchors.n();
        for g in &gt {
            let found = (0..cfg.height * cfg.width * n).any(|a| {
                let cell = a / n;
                m[2 * a] == 1
                    && iou(
                        &anchors.anchor(cell / cfg.width, cell % cfg.width, a % n),
                        g,
                    ) > 0.0
            });
            assert!(found, "seed {seed}: {g} has no foreground anchor");
        }
    }
}
