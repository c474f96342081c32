"""Smoke test for the divex extension module.

Run with `python crates/py/python/smoke_test.py` or under pytest after
`pip install --no-build-isolation ./crates/py`.
"""

from fractions import Fraction

import divex


def test_fault_free_run_is_clean_with_equal_traces():
    c = divex.Container.build("corpus:loop_sum", replicas=3, seed=7)
    assert c.replicas == 3 and c.seed == 7
    assert c.certificate()["non_aliasing_code"]
    r = c.run()
    assert r["outcome"]["status"] == "clean" and r["exit_code"] == 0
    assert r["traces"][0] == r["traces"][1] == r["traces"][2]


def test_container_json_round_trips():
    c = divex.Container.build("corpus:fibonacci")
    assert divex.Container.from_json(c.to_json()).to_json() == c.to_json()


def test_unaligned_shift_is_a_semantic_divergence():
    c = divex.Container.build("corpus:loop_sum")
    r = c.run(["5:r0:+2"])
    assert r["exit_code"] == 10
    assert r["outcome"]["kind"] == "semantic_divergence"
    t = c.inject(["5:r0:+2"])
    assert t["latency"] == 0 and not t["undetected"]


def test_campaign_accepts_a_dict():
    spec = {
        "program": {"corpus": "call_chain"},
        "family": {"kind": "return_address_overwrite"},
        "sampling": {"samples": 20},
        "seed": 3,
    }
    r = divex.campaign(spec, workers=2, analyze=True)
    assert r["aggregates"]["detected"] == 20
    assert r["aggregates"]["by_layer"] == {"structural_pc": 20}
    assert r["comparison"]["rows"][0]["satisfied"] == "unresolvable_at_sample_size"


def test_exact_bounds():
    assert divex.epsilon(8, 12, 32) == Fraction(1, 2**52)
    p1, p2 = divex.synthetic_bounds(2048, 12, k_max=2)
    assert p1 == Fraction(12, 2048) * Fraction(1, 2**52)
    assert p2 == p1**2


def test_bad_input_raises_value_error():
    for call in (
        lambda: divex.Container.build("corpus:loop_sum", replicas=1),
        lambda: divex.Container.build("corpus:loop_sum").run(["5:r9:+4"]),
        lambda: divex.synthetic_bounds(4, 0),
    ):
        try:
            call()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


def test_module_metadata():
    assert "loop_sum" in divex.corpus_programs()
    assert "HALT" in divex.isa_reference()
    assert divex.DEFAULT_SEED == 0x5EED0001


if __name__ == "__main__":
    tests = [(n, f) for n, f in sorted(globals().items()) if n.startswith("test_")]
    for name, fn in tests:
        fn()
        print(f"ok {name}")
    print(f"{len(tests)} passed")
