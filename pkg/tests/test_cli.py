import subprocess
import sys

from fedgcn.cli import main
from fedgcn.data import load_json_federated

CONFIG = """
algorithm: fedgcn
dataset:
  synthetic: {input_shape: [1, 8, 8], num_clients: 6, held_out_clients: 2, samples_per_client: 10}
clients_per_round: 2
total_rounds: 2
eval_every: 1
lr: 0.05
classifier_channels: [4, 4]
model: {conv_channels: [2], hidden: []}
"""


def test_run_with_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(CONFIG)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--seed", "3", "--out", str(out), "--algorithm", "fedavg"]) == 0
    assert "final accuracy" in capsys.readouterr().out
    text = (out / "metrics.csv").read_text()
    assert ",fedavg," in text
    assert '"seed": 3' in (out / "summary.json").read_text()


def test_gen_data(tmp_path):
    spec = tmp_path / "s.yaml"
    spec.write_text("input_shape: [1, 4, 4]\nnum_clients: 3\nheld_out_clients: 1\nsamples_per_client: 5\n")
    out = tmp_path / "d.json"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    ds = load_json_federated(out)
    assert len(ds.clients) == 3 and len(ds.held_out_clients) == 1


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("algorithm: fedprox\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fedgcn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
