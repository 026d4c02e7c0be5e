import itertools
import math
from collections import Counter

import numpy as np
import pytest

from simat.errors import ConfigError, CoverageError
from simat.oracle import TableOracle
from simat.pipeline import (
    BuildConfig,
    PendingQuery,
    SceneGraphEntry,
    attach_captions,
    build_dataset,
    build_queries,
    compute_weights,
    filter_objects,
    filter_triplets,
    finalize_queries,
    keep_min_image_triplets,
    make_captions,
    oracle_filter,
    render_caption,
    split_images,
)
from simat.store import ImageRecord, Triplet, write_bundle
from simat.store import load_dataset


def entry(image_id, s, r, o):
    return SceneGraphEntry(image_id, Triplet(s, r, o))


def cfg_with(**kwargs):
    base = dict(
        subject_allowlist=frozenset({"man", "dog", "woman"}),
        relation_allowlist=frozenset({"riding", "feeding", "chasing", "holding"}),
    )
    base.update(kwargs)
    return BuildConfig(**base)


def test_filter_triplets_keeps_allowlisted():
    entries = [entry("a", "man", "riding", "horse"), entry("b", "car", "riding", "horse")]
    cfg = cfg_with(subject_allowlist=frozenset({"man"}))
    assert filter_triplets(entries, cfg) == [entries[0]]


def test_filter_triplets_empty_input():
    assert filter_triplets([], cfg_with()) == []


def test_filter_triplets_identity_when_all_allowed():
    entries = [entry("a", "man", "riding", "horse"), entry("b", "dog", "chasing", "cat")]
    cfg = cfg_with(
        subject_allowlist=frozenset({"man", "dog"}),
        relation_allowlist=frozenset({"riding", "chasing"}),
    )
    assert filter_triplets(entries, cfg) == entries


def test_filter_triplets_empty_allowlist_rejected():
    with pytest.raises(ConfigError):
        filter_triplets([], cfg_with(subject_allowlist=frozenset()))


def test_filter_objects_drops_single_relation_objects():
    entries = [
        entry("a", "man", "riding", "horse"),
        entry("b", "man", "feeding", "horse"),
        entry("c", "man", "riding", "grass"),
    ]
    kept = filter_objects(entries, cfg_with())
    assert [e.image_id for e in kept] == ["a", "b"]


def test_filter_objects_frequency_cut_with_tie():
    # pair (dog, holding) sees 11 objects; obj00/obj10 tie at 1 entry each,
    # the lexicographically smaller obj00 survives the max=10 cut
    entries = []
    for i in range(11):
        count = 2 if 0 < i < 10 else 1
        for c in range(count):
            entries.append(entry(f"h{i:02d}x{c}", "dog", "holding", f"obj{i:02d}"))
    for i in range(11):  # second relation so step 1 keeps every object
        entries.append(entry(f"r{i:02d}", "dog", "riding", f"obj{i:02d}"))
    kept = filter_objects(entries, cfg_with())
    kept_objects = {e.triplet.object for e in kept if e.triplet.relation == "holding"}
    assert "obj10" not in kept_objects
    assert kept_objects == {f"obj{i:02d}" for i in range(10)}


def brute_force_filter_objects(entries, max_objects):
    relations = {}
    for e in entries:
        relations.setdefault(e.triplet.object, set()).add(e.triplet.relation)
    step1 = [e for e in entries if len(relations[e.triplet.object]) >= 2]
    out = []
    pairs = {(e.triplet.subject, e.triplet.relation) for e in step1}
    keep = {}
    for s, r in pairs:
        counts = Counter(e.triplet.object for e in step1 if (e.triplet.subject, e.triplet.relation) == (s, r))
        ranked = sorted(counts, key=lambda o: (-counts[o], o))[:max_objects]
        keep[(s, r)] = set(ranked)
    for e in step1:
        if e.triplet.object in keep[(e.triplet.subject, e.triplet.relation)]:
            out.append(e)
    return out


def test_filter_objects_matches_brute_force_on_random_fixtures():
    rng = np.random.default_rng(5)
    subjects = ["man", "dog", "woman"]
    relations = ["riding", "feeding", "chasing", "holding"]
    objects = [f"o{i}" for i in range(8)]
    for trial in range(25):
        entries = [
            entry(
                f"e{trial}x{i}",
                subjects[rng.integers(len(subjects))],
                relations[rng.integers(len(relations))],
                objects[rng.integers(len(objects))],
            )
            for i in range(int(rng.integers(1, 60)))
        ]
        cfg = cfg_with(max_objects_per_pair=int(rng.integers(1, 4)))
        assert filter_objects(entries, cfg) == brute_force_filter_objects(
            entries, cfg.max_objects_per_pair
        )


def test_keep_min_image_triplets():
    entries = [
        entry("a", "man", "riding", "horse"),
        entry("b", "man", "riding", "horse"),
        entry("c", "man", "feeding", "horse"),
    ]
    kept = keep_min_image_triplets(entries, cfg_with(min_images_per_triplet=2))
    assert [e.image_id for e in kept] == ["a", "b"]


def images_from(triplets):
    return [
        ImageRecord(f"img{i:02d}", t, "dev", i) for i, t in enumerate(triplets)
    ]


def test_build_queries_two_triplet_world():
    images = images_from([Triplet("man", "riding", "horse"), Triplet("man", "riding", "bike")])
    out = build_queries(images)
    got = [(img.image_id, f, w) for img, f, w, _ in out]
    assert got == [
        ("img00", "object", "bike"),
        ("img01", "object", "horse"),
    ]


def test_build_queries_no_partner():
    images = images_from([Triplet("man", "riding", "horse"), Triplet("dog", "chasing", "ball")])
    assert build_queries(images) == []


def test_build_queries_subject_swap():
    images = images_from(
        [Triplet("man", "riding", "horse"), Triplet("woman", "riding", "horse")]
    )
    got = [(img.image_id, f, w) for img, f, w, _ in build_queries(images)]
    assert got == [("img00", "subject", "woman"), ("img01", "subject", "man")]


def test_build_queries_symmetry():
    # if (I, w1->w2) exists for field f, every image of the target triplet
    # yields the reverse query (I', w2->w1)
    rng = np.random.default_rng(9)
    triplets = [
        Triplet(f"s{rng.integers(3)}", f"r{rng.integers(3)}", f"o{rng.integers(3)}")
        for _ in range(30)
    ]
    images = images_from(triplets)
    queries = build_queries(images)
    by_image = {}
    for img in images:
        by_image.setdefault(img.triplet, []).append(img)
    produced = {(img.image_id, f, w2) for img, f, w2, _ in queries}
    for img, field_name, w2, target in queries:
        for partner in by_image[target]:
            w1 = img.triplet.get(field_name)
            assert (partner.image_id, field_name, w1) in produced


def test_render_caption_paper_example():
    assert (
        render_caption(Triplet("man", "sitting on", "chair"))
        == "A man sitting on a chair"
    )


def test_render_caption_vowel_articles():
    assert (
        render_caption(Triplet("elephant", "eating", "apple"))
        == "An elephant eating an apple"
    )


def test_render_caption_template_missing_placeholder():
    with pytest.raises(ConfigError):
        render_caption(Triplet("man", "riding", "horse"), "A {subject} {relation}")


def pending(image_id, field_name, w1, w2, cap):
    return PendingQuery(image_id, field_name, w1, w2, cap)


def test_oracle_filter_strict_inequalities():
    images = {"img": Triplet("man", "riding", "horse")}
    captions = make_captions(
        [Triplet("man", "riding", "horse"), Triplet("man", "riding", "bike")]
    )
    by_triplet = {c.triplet: c for c in captions}
    source = by_triplet[images["img"]].caption_id
    target = by_triplet[Triplet("man", "riding", "bike")].caption_id
    queries = [pending("img", "object", "horse", "bike", target)]

    def run(p_source, p_target, hi=0.9, lo=0.1):
        oracle = TableOracle({("img", source): p_source, ("img", target): p_target})
        cfg = cfg_with(oracle_hi=hi, oracle_lo=lo)
        return oracle_filter(queries, images, by_triplet, oracle, cfg)

    assert run(0.95, 0.05) == queries
    assert run(0.95, 0.10) == []  # target at the low boundary: dropped
    assert run(0.90, 0.05) == []  # source at the high boundary: dropped


def test_oracle_filter_missing_scores_listed():
    images = {"img": Triplet("man", "riding", "horse")}
    captions = make_captions(
        [Triplet("man", "riding", "horse"), Triplet("man", "riding", "bike")]
    )
    by_triplet = {c.triplet: c for c in captions}
    target = by_triplet[Triplet("man", "riding", "bike")].caption_id
    queries = [pending("img", "object", "horse", "bike", target)]
    with pytest.raises(CoverageError) as exc:
        oracle_filter(queries, images, by_triplet, TableOracle({}), cfg_with())
    assert exc.value.missing


def test_compute_weights_four_one_fixture():
    queries = [pending(f"i{i}", "object", "a", "b", "c") for i in range(4)]
    queries.append(pending("i4", "object", "a", "x", "c"))
    weighted = compute_weights(queries)
    mus = [q.weight for q in weighted]
    assert mus[:4] == [0.5 / 3.0] * 4
    assert mus[4] == 1.0 / 3.0
    assert abs(math.fsum(mus) - 1.0) < 1e-12


def test_compute_weights_uniform_when_all_groups_singletons():
    queries = [pending(f"i{i}", "object", "a", f"b{i}", "c") for i in range(5)]
    weighted = compute_weights(queries)
    for q in weighted:
        assert abs(q.weight - 0.2) < 1e-15


def test_compute_weights_single_query():
    (one,) = compute_weights([pending("i", "object", "a", "b", "c")])
    assert one.weight == 1.0


def test_compute_weights_more_members_smaller_mu():
    queries = [pending(f"i{i}", "object", "a", "b", "c") for i in range(9)]
    queries += [pending(f"j{i}", "object", "a", "x", "c") for i in range(4)]
    weighted = compute_weights(queries)
    big_group = weighted[0].weight
    small_group = weighted[-1].weight
    assert 0 < big_group < small_group


def test_split_even_and_odd():
    even = split_images([f"i{j}" for j in range(4)], seed=1)
    assert Counter(even.values()) == {"dev": 2, "test": 2}
    odd = split_images([f"i{j}" for j in range(5)], seed=1)
    assert Counter(odd.values()) == {"dev": 3, "test": 2}


def test_split_deterministic():
    ids = [f"i{j}" for j in range(20)]
    assert split_images(ids, seed=42) == split_images(ids, seed=42)
    assert split_images(ids, seed=42) != split_images(ids, seed=43)


def toy_entries():
    rows = [
        ("im01", "man", "riding", "horse"),
        ("im02", "man", "riding", "horse"),
        ("im03", "man", "feeding", "horse"),
        ("im04", "man", "feeding", "horse"),
        ("im05", "man", "riding", "bike"),
        ("im06", "man", "riding", "bike"),
        ("im07", "dog", "chasing", "bike"),
        ("im08", "dog", "chasing", "bike"),
        ("im09", "dog", "chasing", "horse"),
        ("im10", "dog", "chasing", "horse"),
        ("im11", "car", "parked", "street"),
        ("im12", "man", "petting", "cat"),
    ]
    return [entry(*row) for row in rows]


def toy_config():
    return cfg_with(
        subject_allowlist=frozenset({"man", "dog"}),
        relation_allowlist=frozenset({"riding", "feeding", "chasing"}),
        split_seed=3,
    )


def test_build_dataset_end_to_end():
    dataset = build_dataset(toy_entries(), toy_config())
    assert len(dataset.images) == 10
    assert len(dataset.captions) == 5
    got = {(q.image_id, q.field, q.source_word, q.target_word) for q in dataset.queries}
    expected = {
        ("im01", "object", "horse", "bike"),
        ("im01", "relation", "riding", "feeding"),
        ("im02", "object", "horse", "bike"),
        ("im02", "relation", "riding", "feeding"),
        ("im03", "relation", "feeding", "riding"),
        ("im04", "relation", "feeding", "riding"),
        ("im05", "object", "bike", "horse"),
        ("im06", "object", "bike", "horse"),
        ("im07", "object", "bike", "horse"),
        ("im08", "object", "bike", "horse"),
        ("im09", "object", "horse", "bike"),
        ("im10", "object", "horse", "bike"),
    }
    assert got == expected


def test_pipeline_determinism_byte_identical(tmp_path):
    for attempt in ("one", "two"):
        dataset = build_dataset(toy_entries(), toy_config())
        write_bundle(tmp_path / attempt, dataset)
    for name in ("images.tsv", "captions.tsv", "queries.tsv", "words.tsv", "images.smat"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_built_bundle_loads(tmp_path):
    dataset = build_dataset(toy_entries(), toy_config())
    write_bundle(tmp_path / "b", dataset)
    loaded = load_dataset(tmp_path / "b")
    assert len(loaded.queries) == len(dataset.queries)
