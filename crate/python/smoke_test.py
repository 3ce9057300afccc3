"""Smoke test for the `mcd` extension module.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/mcd-*.whl
"""

import math

import mcd


def close(a, b, tol=1e-12):
    return all(abs(x - y) <= tol for x, y in zip(a, b)) and len(a) == len(b)


def main():
    p = mcd.softmax([1.0, 2.0, 3.0])
    assert abs(sum(p) - 1.0) < 1e-12 and p[2] > p[1] > p[0]
    assert abs(mcd.cosine_similarity([1.0, 0.0], [0.0, 1.0])) < 1e-12

    weak, strong, amateur = [0.5, 0.3, 0.2], [0.2, 0.6, 0.2], [0.6, 0.2, 0.2]
    out = mcd.mcd_combine(amateur, weak, strong, gamma=0.0, lambda_=1.0, beta=0.0)
    assert close(out["distribution"], weak, 1e-9)
    out = mcd.mcd_combine(amateur, weak, strong, gamma=0.1, lambda_=1.0)
    assert close(out["raw"], mcd.vcd_combine(weak, amateur, 0.1))
    assert mcd.plausibility_mask([0.5, 0.05, 0.45], 0.1) == [0, 1, 2]

    params = mcd.DecodeParams("mcd")
    assert params.gamma == 0.1 and params.beta == 0.1 == mcd.DEFAULT_BETA
    assert mcd.DecodeParams.from_config(params.to_config()).to_config() == params.to_config()

    model = mcd.ToyModel(seed=3)
    again = mcd.ToyModel.from_bytes(model.to_bytes())
    video = [[math.sin(i + j) for j in range(16)] for i in range(4)]
    prompt = [0, 9, 10, 11]
    assert model.forward(prompt, video) == again.forward(prompt, video)
    assert close(model.forward(prompt, video), model.forward(prompt, video, alpha=0.0))
    branches = model.branches(prompt, video)
    assert set(branches) == {"amateur", "weak", "strong"}
    tokens = model.decode(prompt, video, mcd.DecodeParams("beam", beam_width=1, max_new_tokens=4))
    assert tokens == model.decode(prompt, video, mcd.DecodeParams("greedy", max_new_tokens=4))
    answer, _ = model.answer([12], [("A", [20]), ("B", [21])], video, params)
    assert answer in ("A", "B")

    perfect = mcd.metrics_report(
        [("relevant", "A", "A", "B", "B"), ("distorted", "C", "C", "D", "D")],
        [(True, True)] * 3,
    )
    assert list(perfect.values()) == [100.0, 0.0, 100.0, 0.0, 100.0, 100.0]
    assert round(mcd.compute_tcr(3, 2, 1, 4), 2) == 60.0
    assert round(mcd.compute_ra(3, 2, 1, 4), 2) == 30.0

    dataset, features = mcd.generate_synthetic_dataset(seed=1, n_avc=6, n_iqp=6, n_videos=6)
    preds = mcd.run_variant(model, dataset, features, params, workers=4)
    assert preds == mcd.run_variant(model, dataset, features, params, workers=1)
    report = mcd.evaluate(preds, dataset)
    assert list(report) == ["ACC_rel", "BVC_rel", "ACC_dis", "BVC_dis", "TCR", "RA"]

    scenario = mcd.build_biased_scenario(0)
    assert scenario["mcd"]["BVC_rel"] < scenario["greedy"]["BVC_rel"]
    assert scenario["mcd"]["TCR"] > scenario["greedy"]["TCR"]

    try:
        mcd.DecodeParams("mcd", gamma=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative gamma accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
