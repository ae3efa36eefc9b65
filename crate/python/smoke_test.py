"""Smoke test for the mapg Python extension.

Build and install it first:
    pip install --no-build-isolation -e crates/python
"""

import json
import math

import mapg


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    # three-action worked example
    q = [2.0, 1.0, 100.0]
    pi = mapg.softmax([math.log(8.0), 0.0, 0.0])
    assert all(close(a, b, 1e-15) for a, b in zip(pi, [0.8, 0.1, 0.1]))
    assert close(mapg.baseline(q, pi, "coma"), 11.7)
    b_star = mapg.baseline(q, pi, "ob")
    assert close(b_star, 14.842 / 0.34, 1e-9)
    assert close(mapg.excess_variance(b_star, q, pi), 0.0)
    assert [round(x, 4) for x in mapg.x_measure(pi)] == [0.1412, 0.4294, 0.4294]

    toy_json, all_pass = mapg.toy_report()
    toy = json.loads(toy_json)
    failing = sorted(c["name"] for c in toy["checks"] if not c["pass"])
    print("toy golden checks failing:", failing, "all pass:", all_pass)

    # games, policies and exact values
    game = mapg.Game.random(2, 2, 3, seed=4)
    assert game.validate() == []
    assert mapg.Game.from_json(game.to_json()).to_json() == game.to_json()
    policy = mapg.Policy.random(game, scale=1.0, seed=1)
    v, qs = mapg.solve(game, policy)
    assert len(v) == game.n_states and len(qs) == game.n_states * game.n_joint_actions
    print("J =", mapg.expected_return(game, policy))

    report = json.loads(mapg.report(game, policy, agent=1, mc=20000, seed=3))
    for kind in report["kinds"]:
        mc = kind["mc"]
        z = abs(mc["estimate"] - kind["trajectory_variance"]) / mc["standard_error"]
        print(f"{kind['kind']:>20}: exact {kind['trajectory_variance']:.4f}  mc {mc['estimate']:.4f}  ({z:.2f} SE)")

    est, se = mapg.mc_variance(game, policy, "ob", agent=0, n=5000, seed=2)
    assert est > 0 and se > 0

    value, se = mapg.gaussian_baseline(lambda a: -3.25, [0.0], [1.0], n_samples=100)
    assert value == -3.25

    verify = json.loads(mapg.verify(games=5, agents=2, seed=0))
    assert verify["passed"], verify

    history_json, trained = mapg.train(mapg.Game.coordination(), json.dumps({"iterations": 200}))
    history = json.loads(history_json)
    print("coordination game final J:", history["final_return"])
    assert history["final_return"] > 0.9
    assert len(trained.probs(0, 0)) == 3

    try:
        mapg.baseline(q, pi, "bogus")
    except ValueError as e:
        print("rejected unknown baseline:", e)
    else:
        raise AssertionError("expected ValueError")

    print("smoke test ok")


if __name__ == "__main__":
    main()
