"""Report emission: machine-readable JSON, delimited CSV, and rendered figures.

Every reporting command writes the same three artifacts next to each
other: <prefix>.json (full structure), <prefix>.csv (flat rows), and
<prefix>.png (a matplotlib rendering of the communication breakdown).
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .ledger import CommLedger, Phase  # noqa: E402

_MIB = 1024.0 * 1024.0


def write_json(payload: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def write_csv(rows: list[dict], path: str) -> None:
    if not rows:
        with open(path, "w") as f:
            f.write("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def ledger_report(ledger: CommLedger, prefix: str, title: str = "") -> dict:
    """Ledger -> <prefix>.{json,csv,png}; returns the JSON payload."""
    by_proto = ledger.modeled_by_protocol()
    payload = {
        "title": title,
        "totals": {
            "modeled_offline_bits": ledger.total_modeled(Phase.OFFLINE),
            "modeled_online_bits": ledger.total_modeled(Phase.ONLINE),
            "modeled_total_bits": ledger.total_modeled(),
            "wire_total_bits": ledger.total_wire(),
        },
        "by_protocol": {
            k: {"offline_bits": v[Phase.OFFLINE], "online_bits": v[Phase.ONLINE]}
            for k, v in sorted(by_proto.items())
        },
        "entries": ledger.to_rows(),
    }
    write_json(payload, prefix + ".json")
    write_csv(ledger.to_rows(), prefix + ".csv")
    _plot_breakdown(by_proto, prefix + ".png", title)
    return payload


def _plot_breakdown(by_proto: dict, path: str, title: str) -> None:
    names = sorted(by_proto)
    offline = [by_proto[n][Phase.OFFLINE] / _MIB for n in names]
    online = [by_proto[n][Phase.ONLINE] / _MIB for n in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(names))
    ax.bar(xs, offline, label="offline", color="#4878b0")
    ax.bar(xs, online, bottom=offline, label="online", color="#e1812c")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("modeled communication (Mibit)")
    ax.set_title(title or "communication breakdown")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def optimize_report(stages: list[dict], prefix: str, title: str = "") -> dict:
    """Per-pass estimate table -> <prefix>.{json,csv,png} plus a text table.

    stages: [{"pass": name, "offline_bits": .., "online_bits": .., "total_bits": ..}]
    """
    payload = {"title": title, "stages": stages}
    write_json(payload, prefix + ".json")
    write_csv(stages, prefix + ".csv")
    names = [s["pass"] for s in stages]
    totals = [s["total_bits"] / _MIB for s in stages]
    online = [s["online_bits"] / _MIB for s in stages]
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(names))
    ax.plot(xs, totals, marker="o", label="total")
    ax.plot(xs, online, marker="s", label="online")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("modeled communication (Mibit)")
    ax.set_title(title or "estimate per optimizer pass")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(prefix + ".png", dpi=130)
    plt.close(fig)
    return payload


def format_table(stages: list[dict]) -> str:
    header = f"{'pass':<22}{'offline':>16}{'online':>16}{'total':>16}"
    lines = [header, "-" * len(header)]
    for s in stages:
        lines.append(f"{s['pass']:<22}{s['offline_bits']:>16,}"
                     f"{s['online_bits']:>16,}{s['total_bits']:>16,}")
    return "\n".join(lines)


def training_report(losses: list[float], accuracy: float, prefix: str) -> dict:
    payload = {"final_loss": losses[-1], "accuracy": accuracy,
               "epochs": len(losses) - 1}
    write_json(payload, prefix + ".json")
    write_csv([{"epoch": i, "loss": v} for i, v in enumerate(losses)],
              prefix + ".csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_title(f"toy finetuning (final accuracy {accuracy:.1%})")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(prefix + ".png", dpi=130)
    plt.close(fig)
    return payload
