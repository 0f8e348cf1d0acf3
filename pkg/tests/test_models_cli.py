import json
import threading

import numpy as np

from helpers import run_tcp_both
from wino2pc.cli import main as cli_main
from wino2pc.graphir import infer
from wino2pc.models import (load_input, load_model, lower_model,
                            transform_weights)
from wino2pc.passes import run_pipeline
from wino2pc.qtensor import QTensor, QuantParams, load_qtsr, save_qtsr
from wino2pc.runner import run_graph_2pc, run_graph_plain
from wino2pc.zoo import write_single_conv

_PORTS = iter(range(23000, 24000))


class TestTransformWeights:
    def test_idempotent(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=0, lw=4, la=6, c=3, k=2, h=6)
        first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        transform_weights(jp)
        second = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        assert first == second

    def test_zero_weights_give_zero_files(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=1, lw=2, la=4, c=2, k=2, h=4)
        model = load_model(jp)
        zero = QTensor(np.zeros((2, 2, 3, 3), dtype=np.int64),
                       QuantParams(24, 16))
        save_qtsr(tmp_path / "conv.w.qtsr", zero)
        transform_weights(jp)
        win = load_qtsr(tmp_path / "conv.win.qtsr")
        assert not win.data.any()

    def test_reweight_outliers_flag(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=2, lw=4, la=6, c=2, k=2, h=4)
        model = load_model(jp)
        w = np.full((2, 2, 3, 3), 0.01)
        w[0, 0, 1, 1] = 2.0  # dominant spike survives the transform
        from wino2pc.models import float_carrier

        save_qtsr(tmp_path / "conv.w.qtsr", float_carrier(w))
        model = transform_weights(jp, reweight_outliers=True,
                                  outlier_threshold=4.0)
        assert model["layers"][0]["bit_importance"] == [16, 4, 2, 1]


class TestLoweringAndRunners:
    def test_plain_deterministic(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=3, lw=2, la=6, c=3, k=3, h=6)
        model = load_model(jp)
        g = lower_model(model)
        x = load_input(model)
        a, _ = run_graph_plain(g, x)
        b, _ = run_graph_plain(g, x)
        assert a == b

    def test_zero_input_zero_output_conv_only(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=4, lw=2, la=4, c=2, k=2,
                               h=4, with_relu=False)
        model = load_model(jp)
        g = lower_model(model)
        zero = QTensor(np.zeros((1, 2, 4, 4), dtype=np.int64),
                       QuantParams(8, 0))
        out, _ = run_graph_plain(g, zero)
        assert not out.data.any()

    def test_direct_lowering_executes(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=5, lw=2, la=4, c=2, k=3, h=6)
        model = load_model(jp)
        g = lower_model(model, use_winograd=False)
        x = load_input(model)
        plain, _ = run_graph_plain(g, x)
        out, _, _ = run_graph_2pc(g, x, seed=1)
        assert np.array_equal(out.data, plain.data)

    def test_stride2_falls_back_to_direct(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=6, lw=2, la=4, c=2, k=2, h=8)
        model = load_model(jp)
        model["layers"][0]["stride"] = 2
        g = lower_model(model)
        assert not any(n.kind == "FeatureTransform" for n in g)
        x = load_input(model)
        plain, _ = run_graph_plain(g, x)
        out, _, _ = run_graph_2pc(g, x, seed=2)
        assert np.array_equal(out.data, plain.data)
        assert plain.shape[-1] == 4

    def test_tcp_matches_inproc(self, tmp_path):
        jp = write_single_conv(str(tmp_path), seed=7, lw=4, la=6, c=3, k=2, h=6)
        model = load_model(jp)
        g = run_pipeline(lower_model(model))
        x = load_input(model)
        out_ip, led_ip, m_ip = run_graph_2pc(g, x, seed=11)
        out_tcp, led_tcp, m_tcp = run_tcp_both(g, x, seed=11)
        assert np.array_equal(out_tcp.data, out_ip.data)
        assert led_tcp.total_modeled() == led_ip.total_modeled()
        assert led_tcp.total_wire() == led_ip.total_wire()
        assert m_tcp == m_ip


class TestBundledModels:
    def test_minionn_lowering_typechecks(self, minionn_model_path):
        model = load_model(minionn_model_path)
        g = lower_model(model)
        infer(g)
        kinds = [n.kind for n in g]
        assert kinds.count("Gemm") == 8  # 7 convs + classifier head
        assert kinds.count("Relu") == 7

    def test_resnet_residuals_lowered(self, resnet_model_path):
        model = load_model(resnet_model_path)
        g = lower_model(model)
        assert sum(1 for n in g if n.kind == "ResidualAdd") == 2

    def test_resnet_exactness(self, resnet_model_path):
        model = load_model(resnet_model_path)
        g = lower_model(model)
        x = load_input(model)
        plain, _ = run_graph_plain(g, x)
        g_opt = run_pipeline(g)
        out, _, _ = run_graph_2pc(g_opt, x, seed=0)
        assert np.array_equal(out.data, plain.data)


class TestCli:
    def test_optimize_and_reports(self, tmp_path):
        jp = write_single_conv(str(tmp_path / "m"), seed=8, lw=2, la=6,
                               c=3, k=3, h=6)
        rep = tmp_path / "opt"
        rc = cli_main(["optimize-graph", "--model", jp, "--report", str(rep),
                       "--out-graph", str(tmp_path / "g.json")])
        assert rc == 0
        payload = json.loads((tmp_path / "opt.json").read_text())
        stages = payload["stages"]
        assert stages[0]["pass"] == "unoptimized"
        assert stages[-1]["total_bits"] <= stages[0]["total_bits"]
        for s in stages:
            assert s["offline_bits"] + s["online_bits"] == s["total_bits"]
        assert (tmp_path / "opt.csv").exists()
        assert (tmp_path / "opt.png").exists()
        assert (tmp_path / "g.json").exists()

    def test_run_2pc_equals_run_plain(self, tmp_path):
        jp = write_single_conv(str(tmp_path / "m"), seed=9, lw=4, la=4,
                               c=2, k=2, h=4)
        p_out = tmp_path / "p.qtsr"
        s_out = tmp_path / "s.qtsr"
        assert cli_main(["run-plain", "--model", jp, "--out", str(p_out)]) == 0
        rep = tmp_path / "run"
        assert cli_main(["run-2pc", "--model", jp, "--out", str(s_out),
                        "--seed", "5", "--report", str(rep)]) == 0
        assert p_out.read_bytes() == s_out.read_bytes()
        payload = json.loads((tmp_path / "run.json").read_text())
        by_proto = payload["by_protocol"]
        total = sum(v["offline_bits"] + v["online_bits"]
                    for v in by_proto.values())
        assert total == payload["totals"]["modeled_total_bits"]
        assert (tmp_path / "run.csv").exists()
        assert (tmp_path / "run.png").exists()

    def test_run_2pc_tcp_roles(self, tmp_path):
        jp = write_single_conv(str(tmp_path / "m"), seed=10, lw=2, la=4,
                               c=2, k=2, h=4)
        port = next(_PORTS)
        outs = {}

        def party(role, out):
            outs[role] = cli_main([
                "run-2pc", "--model", jp, "--transport", "tcp",
                "--role", role, "--peer", f"127.0.0.1:{port}",
                "--seed", "3", "--out", str(out)])

        s_out = tmp_path / "srv.qtsr"
        c_out = tmp_path / "cli.qtsr"
        ts = threading.Thread(target=party, args=("server", s_out))
        tc = threading.Thread(target=party, args=("client", c_out))
        ts.start()
        tc.start()
        ts.join(60)
        tc.join(60)
        assert outs == {"server": 0, "client": 0}
        assert cli_main(["run-plain", "--model", jp,
                         "--out", str(tmp_path / "p.qtsr")]) == 0
        assert c_out.read_bytes() == (tmp_path / "p.qtsr").read_bytes()

    def test_assign_bits_cli(self, tmp_path):
        rows = [
            {"layer": "a", "bits": 2, "omega": 5.0, "comm_bits": 10},
            {"layer": "a", "bits": 4, "omega": 1.0, "comm_bits": 20},
        ]
        sens = tmp_path / "sens.json"
        sens.write_text(json.dumps(rows))
        assert cli_main(["assign-bits", "--sensitivity", str(sens),
                         "--zeta", "20"]) == 0
        assert cli_main(["assign-bits", "--sensitivity", str(sens),
                         "--zeta", "5"]) == 3

    def test_quantize_toy_cli(self, tmp_path):
        rep = tmp_path / "toy"
        rc = cli_main(["quantize-toy", "--lw", "4", "--epochs", "40",
                       "--out", str(tmp_path / "model"),
                       "--report", str(rep)])
        assert rc == 0
        assert (tmp_path / "model" / "model.json").exists()
        assert (tmp_path / "toy.png").exists()
        assert (tmp_path / "toy.csv").exists()

    def test_missing_model_is_config_error(self, tmp_path):
        assert cli_main(["run-plain", "--model",
                         str(tmp_path / "nope.json")]) == 3

    def test_plan_override_f43_end_to_end(self, tmp_path):
        jp = write_single_conv(str(tmp_path / "m"), seed=12, lw=2, la=4,
                               c=2, k=2, h=8)
        assert cli_main(["transform-weights", "--model", jp,
                         "--plan", "f4x3"]) == 0
        model = load_model(jp)
        assert model["layers"][0]["plan_m"] == 4
        g = lower_model(model)
        from wino2pc.models import load_input as _li

        x = _li(model)
        plain, _ = run_graph_plain(g, x)
        out, _, _ = run_graph_2pc(run_pipeline(g), x, seed=4)
        assert np.array_equal(out.data, plain.data)

    def test_empty_pass_list_is_identity(self, tmp_path):
        jp = write_single_conv(str(tmp_path / "m"), seed=13, lw=2, la=4,
                               c=2, k=2, h=4)
        rc = cli_main(["optimize-graph", "--model", jp, "--passes", "",
                       "--report", str(tmp_path / "noop")])
        assert rc == 0
        payload = json.loads((tmp_path / "noop.json").read_text())
        assert [s["pass"] for s in payload["stages"]] == ["unoptimized"]


class TestLedgerPhases:
    def test_gemm_graph_has_both_phases(self, tmp_path):
        from wino2pc.ledger import Phase
        from wino2pc.models import load_input, load_model, lower_model

        jp = write_single_conv(str(tmp_path), seed=14, lw=2, la=4,
                               c=2, k=2, h=4)
        model = load_model(jp)
        g = lower_model(model)
        x = load_input(model)
        _, ledger, _ = run_graph_2pc(g, x, seed=0)
        assert ledger.total_modeled(Phase.OFFLINE) > 0
        assert ledger.total_modeled(Phase.ONLINE) > 0

    def test_direct_path_through_cli(self, tmp_path):
        jp = write_single_conv(str(tmp_path / "m"), seed=15, lw=2, la=4,
                               c=2, k=2, h=4)
        p_out = tmp_path / "p.qtsr"
        s_out = tmp_path / "s.qtsr"
        assert cli_main(["run-plain", "--model", jp, "--direct",
                         "--out", str(p_out)]) == 0
        assert cli_main(["run-2pc", "--model", jp, "--direct",
                         "--out", str(s_out), "--seed", "2"]) == 0
        assert p_out.read_bytes() == s_out.read_bytes()
