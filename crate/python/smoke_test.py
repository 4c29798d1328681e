"""Smoke test for the chainrag Python extension.

Build the module first, for example with
`maturin develop -m crates/python/Cargo.toml`, then run this script from the
repository root.
"""

import math
import pathlib

import chainrag

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "fixtures"


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    ln2 = math.log(2.0)
    assert close(chainrag.dpo_loss(-10.0, -10.0, -12.0, -12.0), ln2)
    assert close(chainrag.ancpo_loss(-4.0, -4.0), ln2)
    assert close(chainrag.lidpo_loss(-10.0, -10.0, -12.0, -12.0), 2 * ln2)
    d = chainrag.dpo_loss(-9.0, -10.0, -12.0, -11.0, beta_kl=0.5)
    assert close(d, math.log1p(math.exp(-1.0)))

    suite = chainrag.run_loss_suite(trials=20, seed=3)
    assert suite["passed"], suite
    assert suite["max_rel_error"] < 1e-4

    pairs = chainrag.build_preference_pairs(3, [(1, 2), (2, 3)])
    assert pairs == [([1, 2, 3], [2, 1, 3]), ([1, 2, 3], [1, 3, 2])], pairs
    try:
        chainrag.build_preference_pairs(2, [(1, 2), (2, 1)])
    except chainrag.ChainragError:
        pass
    else:
        raise AssertionError("cycle accepted")

    chain = chainrag.parse_chain("Q: What is it? | A: a tower\nQ: Who built it? | A: Eiffel", "Who built this?")
    assert chain == [("What is it?", "a tower"), ("Who built it?", "Eiffel")], chain

    assert chainrag.normalize_answer("  The  Eiffel Tower. ") == "eiffel tower"
    assert close(chainrag.vqa_accuracy("gothic", ["gothic", "Gothic", "baroque"]), 2 / 3)

    index = chainrag.VectorIndex(["a", "b", "c"], ["x", "y", "z"], [[1, 0], [0, 1], [1, 1]])
    assert len(index) == 3 and index.dim == 2
    hits = index.topk([1.0, 0.0], 2)
    assert [h[0] for h in hits] == ["a", "c"], hits
    assert close(hits[1][1], 1 / math.sqrt(2))

    prompt = chainrag.assemble_prompt(
        "Why?",
        [("q1", "a1", "e1", 0.9), ("q2", "a2", "e2", 0.1)],
        caption="cap",
        head="H",
        budget=1,
    )
    assert "Q: q1 A: a1 E: e1" in prompt and "q2" not in prompt, prompt

    pipeline = chainrag.Pipeline.from_corpus(FIXTURES / "mock_config.toml", FIXTURES / "corpus.jsonl")
    out = pipeline.ask("Who designed this tower?", "img://tower.jpg", caption="A tall iron lattice tower.")
    assert chainrag.normalize_answer(out["answer"]) == "gustave eiffel", out
    assert out["decomposed"] and len(out["chain"]) >= 1
    assert out["prompt"].endswith("Who designed this tower?")

    print("smoke test passed")


if __name__ == "__main__":
    main()
