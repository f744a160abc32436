"""Command-line entry point: dataset generation, training, diffusion
analysis, OOD scoring, perturbation sweeps, and energy reports.

File formats
------------
Event frames travel in a little-endian binary container: the magic
``MSNN``, a u16 format version, u32 dims T/C/H/W, u32 sample count, u32
class count, then per sample a u32 label followed by T*C*H*W bytes, one
byte per element, each 0 or 1.  No bit packing; desk-scale sizes keep
simplicity ahead of density.

Checkpoints are JSON documents: a config echo, every parameter array
and BN running statistic as decimal 64-bit reals (shortest round-trip
representation, so save -> load reproduces eval outputs bitwise), and a
format version.

Every command honors its seed (2020 unless overridden) and produces
byte-identical artifacts for identical inputs.  Config files are JSON
with keys mirroring the training config; unknown keys are a hard error.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np

from .diffusion import (
    build_operator,
    dirichlet_energy,
    energy_decay_profile,
    graph_adjacency,
    verify_gradient_flow,
)
from .energy import (
    E_AC_PJ,
    E_MAC_PJ,
    E_MUL_PJ,
    count_gd_ops,
    count_spike_acs,
    count_stsp_ops,
    firing_rate_report,
)
from .network import network_forward
from .numgrad import DataError, ParameterError, Rng, spectral_range
from .ood import (
    OodScoreSet,
    collect_outputs,
    compute_prototypes,
    energy_score,
    knn_score,
    metrics,
    msp_score,
    percentile_nearest_rank,
    prototype_scores,
)
from .training import (
    PerturbSpec,
    SynthStream,
    TrainConfig,
    build_network,
    evaluate,
    generate_dataset,
    split_dataset,
    train,
)

MAGIC = b"MSNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIII")

OOD_METHODS = ("dgp", "msp", "energy", "knn", "scp")


# ---------------------------------------------------------------------------
# event-frame container
# ---------------------------------------------------------------------------

def write_event_file(path, streams, n_classes):
    """Serialize binary spike streams; all frames must share dims."""
    if not streams:
        raise DataError("refusing to write an empty dataset")
    t, c, h, w = streams[0].frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, t, c, h, w,
                              len(streams), n_classes))
        for s in streams:
            if s.frames.shape != (t, c, h, w):
                raise DataError(
                    f"stream shape {s.frames.shape} does not match {(t, c, h, w)}")
            body = np.ascontiguousarray(s.frames, dtype=np.uint8)
            if not np.isin(body, (0, 1)).all():
                raise DataError("event frames must be binary 0/1")
            if not 0 <= s.label < n_classes:
                raise DataError(f"label {s.label} outside 0..{n_classes - 1}")
            fh.write(struct.pack("<I", s.label))
            fh.write(body.tobytes())


def read_event_file(path):
    """Parse an event-frame file; returns (streams, n_classes)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, t, c, h, w, count, n_classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    frame_bytes = t * c * h * w
    expect = _HEADER.size + count * (4 + frame_bytes)
    if len(raw) != expect:
        raise DataError(
            f"{path}: expected {expect} bytes for {count} samples, "
            f"got {len(raw)}")
    streams = []
    off = _HEADER.size
    for _ in range(count):
        (label,) = struct.unpack_from("<I", raw, off)
        off += 4
        body = np.frombuffer(raw, dtype=np.uint8, count=frame_bytes,
                             offset=off).reshape(t, c, h, w)
        off += frame_bytes
        if not np.isin(body, (0, 1)).all():
            raise DataError(f"{path}: non-binary frame values")
        if label >= n_classes:
            raise DataError(f"{path}: label {label} outside declared classes")
        streams.append(SynthStream(body.copy(), int(label), "file"))
    return streams, n_classes


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, net, config):
    doc = {
        "format": "dgdsnn-checkpoint",
        "version": FORMAT_VERSION,
        "config": config.as_dict(),
        "params": {
            name: {"shape": list(p.value.shape),
                   "data": p.value.ravel().tolist()}
            for name, p in net.named_parameters().items()
        },
        "buffers": {
            name: {"shape": list(b.shape), "data": b.ravel().tolist()}
            for name, b in net.named_buffers().items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild the network a checkpoint describes; returns (net, config)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "dgdsnn-checkpoint":
        raise DataError(f"{path}: not a checkpoint file")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version")
    config = TrainConfig.from_dict(doc["config"])
    net = build_network(config)
    for name, node in net.named_parameters().items():
        entry = doc["params"].get(name)
        if entry is None:
            raise DataError(f"{path}: missing parameter {name}")
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != node.value.shape:
            raise DataError(
                f"{path}: parameter {name} has shape {arr.shape}, "
                f"expected {node.value.shape}")
        node.value = arr
    for name, buf in net.named_buffers().items():
        entry = doc["buffers"].get(name)
        if entry is None:
            raise DataError(f"{path}: missing buffer {name}")
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        buf[...] = arr
    return net, config


# ---------------------------------------------------------------------------
# small output helpers
# ---------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    data = generate_dataset(args.kind, args.classes, args.samples_per_class,
                            dims=(args.height, args.width),
                            timesteps=args.timesteps, seed=args.seed)
    write_event_file(args.out, data, args.classes)
    print(f"wrote {len(data)} streams to {args.out}")
    return 0


def cmd_train(args):
    if not Path(args.data).is_file():
        print(f"error: data file not found: {args.data}", file=sys.stderr)
        return 1
    with open(args.config) as fh:
        config = TrainConfig.from_dict(json.load(fh))
    streams, n_classes = read_event_file(args.data)
    if n_classes != config.classes:
        raise DataError(
            f"data declares {n_classes} classes, config says {config.classes}")
    train_set, test_set = split_dataset(streams, config.train_fraction,
                                        config.seed)
    net = build_network(config)
    history = train(net, train_set, config, test_data=test_set or None,
                    log=lambda m: print(
                        f"epoch {m.epoch}: loss {m.loss:.4f} "
                        f"train_acc {m.train_accuracy:.3f} "
                        f"test_acc {m.test_accuracy:.3f}"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", net, config)
    write_csv(out / "metrics.csv",
              ["epoch", "loss", "train_acc", "test_acc",
               "mean_dirichlet_energy", "mean_firing_rate"],
              [[m.epoch, m.loss, m.train_accuracy, m.test_accuracy,
                m.mean_dirichlet_energy, m.mean_firing_rate]
               for m in history])
    write_csv(out / "energy_trend.csv",
              ["epoch", "mean_dirichlet_energy"],
              [[m.epoch, m.mean_dirichlet_energy] for m in history])
    print(f"wrote checkpoint and metrics to {out}")
    return 0


def cmd_diffusion_analyze(args):
    rng = Rng(args.seed, stream=6)
    adj = graph_adjacency(args.graph, args.nodes, rng=rng)
    op = build_operator(adj, 1)
    p = op.p.value
    n = p.shape[0]
    lmin, lmax = spectral_range(np.eye(n) - p)
    if args.signal == "antisymmetric":
        y0 = np.array([[1.0 if i % 2 == 0 else -1.0] for i in range(n)])
    else:
        y0 = rng.normal(size=(n, 4))
    energies = energy_decay_profile(op, y0, args.steps)
    rows = [[k, e, lmin, lmax] for k, e in enumerate(energies)]
    header = ["step", "dirichlet_energy", "lambda_min", "lambda_max"]
    if args.out:
        write_csv(args.out, header, rows)
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(_fmt(v) for v in row))

    asym = float(np.abs(p - p.T).max())
    resid = verify_gradient_flow(op, y0)
    monotone = all(energies[i + 1] <= energies[i] + 1e-9
                   for i in range(len(energies) - 1))
    checks = {
        "operator symmetric": asym < 1e-12,
        "laplacian spectrum in [0, 2]": -1e-8 <= lmin and lmax <= 2 + 1e-8,
        "energy non-increasing": monotone,
        "gradient-flow residual < 1e-12": resid < 1e-12,
    }
    ok = all(checks.values())
    detail = "; ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items())
    print(f"verdict: {'PASS' if ok else 'FAIL'} ({detail})")
    return 0 if ok else 1


def _flag_scores(id_scores, ood_scores, kappa):
    return [s > kappa for s in id_scores], [s > kappa for s in ood_scores]


def cmd_ood(args):
    net, config = load_checkpoint(args.checkpoint)
    id_streams, _ = read_event_file(args.id_data)
    ood_streams, _ = read_event_file(args.ood_data)
    id_logits, id_sigs, id_fires, id_labels = collect_outputs(net, id_streams)
    ood_logits, ood_sigs, ood_fires, ood_labels = collect_outputs(
        net, ood_streams)

    method = args.method
    if method == "dgp":
        if float(np.ptp(id_sigs)) == 0.0:
            print("warning: ID topology signatures are degenerate "
                  "(static graph, beta=1); prototype distances are all zero")
        bank = compute_prototypes(id_sigs, id_labels, config.classes)
        id_scores = prototype_scores(id_sigs, bank)
        ood_scores = prototype_scores(ood_sigs, bank)
        kappa = bank.kappa
    elif method == "scp":
        bank = compute_prototypes(id_fires, id_labels, config.classes)
        id_scores = prototype_scores(id_fires, bank)
        ood_scores = prototype_scores(ood_fires, bank)
        kappa = bank.kappa
    elif method == "msp":
        id_scores, ood_scores = msp_score(id_logits), msp_score(ood_logits)
        kappa = percentile_nearest_rank(id_scores, 95)
    elif method == "energy":
        id_scores, ood_scores = energy_score(id_logits), energy_score(ood_logits)
        kappa = percentile_nearest_rank(id_scores, 95)
    else:  # knn
        k = min(args.knn_k, max(1, len(id_streams) // 10))
        id_scores = knn_score(id_fires, id_fires, min(k + 1, len(id_streams)))
        ood_scores = knn_score(ood_fires, id_fires, k)
        kappa = percentile_nearest_rank(id_scores, 95)

    score_set = OodScoreSet(method, np.asarray(id_scores),
                            np.asarray(ood_scores))
    m = metrics(score_set)
    print(f"method={method} auroc={m.auroc:.4f} aupr_out={m.aupr_out:.4f} "
          f"fpr95={m.fpr95:.4f}")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    id_flags, ood_flags = _flag_scores(id_scores, ood_scores, kappa)
    rows = []
    for i, (lab, sc, fl) in enumerate(zip(id_labels, id_scores, id_flags)):
        rows.append([f"id-{i}", int(lab), method, float(sc), int(fl)])
    for i, (lab, sc, fl) in enumerate(zip(ood_labels, ood_scores, ood_flags)):
        rows.append([f"ood-{i}", int(lab), method, float(sc), int(fl)])
    write_csv(out / "scores.csv",
              ["sample_id", "label", "method", "score", "flagged"], rows)
    write_json(out / "metrics.json",
               {"method": method, "kappa": kappa, **m.as_dict()})
    return 0


def cmd_perturb_eval(args):
    nets = [load_checkpoint(args.checkpoint)]
    labels = ["accuracy"]
    if args.checkpoint_static:
        nets.append(load_checkpoint(args.checkpoint_static))
        labels = ["accuracy_full", "accuracy_static"]
    streams, _ = read_event_file(args.data)
    rows = []
    for rho in range(args.rho_max + 1):
        spec = PerturbSpec(args.kind, rho)
        row = [rho]
        for net, _cfg in nets:
            rng = Rng(args.seed, stream=100 + rho)
            report = evaluate(net, streams, perturb_spec=spec, rng=rng)
            row.append(report.accuracy)
        rows.append(row)
    write_csv(args.out, ["rho"] + labels, rows)
    print(f"wrote perturbation curve ({args.kind}) to {args.out}")
    return 0


def cmd_energy_report(args):
    net, config = load_checkpoint(args.checkpoint)
    streams, _ = read_event_file(args.data)
    total_event_acs = 0
    rate_sums = None
    n_seen = 0
    shapes = None
    batch = 32
    for start in range(0, len(streams), batch):
        chunk = streams[start:start + batch]
        frames = np.stack([s.frames for s in chunk]).astype(np.float64)
        _, trace = network_forward(net, frames, mode="eval")
        total_event_acs += count_spike_acs(trace)
        rates = firing_rate_report(trace) * len(chunk)
        rate_sums = rates if rate_sums is None else rate_sums + rates
        n_seen += len(chunk)
        if shapes is None:
            shapes = [layer.spikes[0][0].shape[1:] for layer in trace.layers]

    t, m, n = config.timesteps, config.diffusion_steps, config.nodes
    gd_components = []
    stsp_components = []
    for li, (c, h, w) in enumerate(shapes):
        muls, acs, e_pj = count_gd_ops(t, m, n, c, h, w)
        gd_components.append({"layer": li, "muls": muls, "acs": acs,
                              "energy_pj": e_pj, "energy_mj": e_pj * 1e-9})
        s_acs, s_macs, s_pj = count_stsp_ops(t, n, c, h, w)
        stsp_components.append({"layer": li, "acs": s_acs, "macs": s_macs,
                                "energy_pj": s_pj, "energy_mj": s_pj * 1e-9})
    event_pj = total_event_acs / max(n_seen, 1) * E_AC_PJ
    report = {
        "constants_pj": {"e_mac": E_MAC_PJ, "e_ac": E_AC_PJ, "e_mul": E_MUL_PJ},
        "dense_bounds": {
            "gd": {"per_layer": gd_components,
                   "total_energy_pj": sum(x["energy_pj"] for x in gd_components)},
            "stsp": {"per_layer": stsp_components,
                     "total_energy_pj": sum(x["energy_pj"]
                                            for x in stsp_components)},
        },
        "event_driven": {
            "total_acs": total_event_acs,
            "samples": n_seen,
            "mean_acs_per_sample": total_event_acs / max(n_seen, 1),
            "mean_energy_pj_per_sample": event_pj,
        },
        "firing_rates": [float(r) for r in rate_sums / n_seen],
    }
    write_json(args.out, report)
    if args.firing_csv:
        write_csv(args.firing_csv, ["node_index", "mean_rate"],
                  [[i, float(r)] for i, r in enumerate(rate_sums / n_seen)])
    print(f"wrote energy report to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="dgdsnn",
        description="Dynamic-graph spiking network experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic event dataset")
    p.add_argument("--kind", choices=("moving-bar", "flicker"), required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--samples-per-class", type=int, default=40)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--timesteps", type=int, default=5)
    p.add_argument("--seed", type=int, default=2020)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diffusion-analyze",
                       help="energy decay and spectrum of one operator")
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--steps", type=int, default=12)
    p.add_argument("--graph", choices=("random", "path", "complete"),
                   default="random")
    p.add_argument("--signal", choices=("random", "antisymmetric"),
                   default="random")
    p.add_argument("--seed", type=int, default=2020)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diffusion_analyze)

    p = sub.add_parser("ood", help="score OOD detection methods")
    p.add_argument("--id-data", required=True)
    p.add_argument("--ood-data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=OOD_METHODS, required=True)
    p.add_argument("--knn-k", type=int, default=10)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("perturb-eval",
                       help="accuracy under a perturbation sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--checkpoint-static", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("salt-pepper", "poisson", "frame-loss"),
                   required=True)
    p.add_argument("--rho-max", type=int, default=9)
    p.add_argument("--seed", type=int, default=2020)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb_eval)

    p = sub.add_parser("energy-report",
                       help="synaptic-op counts and picojoule totals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--firing-csv", default=None)
    p.set_defaults(func=cmd_energy_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ParameterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
