"""Regenerate the bundled networks, plants and inputs in src/lipcert/data."""

import json
import sys
from pathlib import Path

import numpy as np

from lipcert.network import Network, random_network, saturated_linear_controller, save_network
from lipcert.stability import double_integrator, lqr_gain

RANDOM_NETS = [
    ([2, 8, 8, 2], "relu", 0),
    ([2, 10, 2], "relu", 0),
    ([3, 16, 16, 2], "tanh", 0),
    ([3, 32, 32, 32, 2], "tanh", 1),
]


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    plant = double_integrator()
    (out / "double_integrator.json").write_text(json.dumps(plant.to_json(), indent=1) + "\n")
    K = lqr_gain(plant)
    save_network(saturated_linear_controller(K), out / "saturated_lqr.json")
    zero = Network.from_arrays([np.zeros((2, 2)), np.zeros((1, 2))], [np.zeros(2), np.zeros(1)], "relu")
    save_network(zero, out / "zero_controller.json")
    for dims, act, seed in RANDOM_NETS:
        name = f"{act}_{'_'.join(map(str, dims))}_seed{seed}.json"
        save_network(random_network(dims, act, seed=seed), out / name)
    clf = random_network([4, 16, 3], "relu", seed=7)
    save_network(clf, out / "classifier_4_16_3.json")
    x = np.random.default_rng(7).uniform(-1, 1, 4).round(6)
    label = int(np.argmax(clf(x)))
    (out / "classifier_input.json").write_text(json.dumps({"x": x.tolist(), "label": label}, indent=1) + "\n")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "src/lipcert/data")
