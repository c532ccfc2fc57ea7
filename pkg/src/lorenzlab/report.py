"""
One-page Markdown digest of a finished run.

The report is best effort: a missing or unreadable artifact becomes a warning
and the section it fed is left out.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from lorenzlab.store import RunManifest, load_manifest, read_json


def _fmt(value: Any, digits: int = 6) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    return str(value)


def _verdict(passed: Optional[bool]) -> str:
    if passed is None:
        return "n/a"
    return "PASS" if passed else "FAIL"


class _Artifacts:
    """Lazy reader for ``<stage>.json`` files that records what went wrong."""

    def __init__(self, run_dir: Path, manifest: RunManifest) -> None:
        self.run_dir = run_dir
        self.manifest = manifest
        self.warnings: list[str] = []

    def load(self, stage: str) -> Optional[dict[str, Any]]:
        if self.manifest.stage(stage) is None:
            return None
        path = self.run_dir / f"{stage}.json"
        try:
            data = read_json(path)
        except FileNotFoundError:
            self.warnings.append(f"{path.name} is missing")
            return None
        except (OSError, json.JSONDecodeError) as exc:
            self.warnings.append(f"{path.name} could not be read: {exc}")
            return None
        if not isinstance(data, dict):
            self.warnings.append(f"{path.name} does not hold a JSON object")
            return None
        return data


# ----- Sections -----


def _stage_table(manifest: RunManifest) -> list[str]:
    lines = ["| stage | gate | wall time (s) |", "|---|---|---|"]
    for record in manifest.stages:
        lines.append(f"| {record.name} | {_verdict(record.passed)} | {record.wall_time:.2f} |")
    for name in manifest.skipped:
        lines.append(f"| {name} | skipped | |")
    return lines


def _exponents(art: _Artifacts) -> list[str]:
    lines: list[str] = []
    lyap = art.load("lyapunov")
    if lyap is not None:
        exps = ", ".join(_fmt(float(v), 5) for v in lyap.get("exponents", []))
        lines += [
            "## Lyapunov exponents",
            "",
            f"- exponents: ({exps})",
            f"- sum residual vs mean divergence: {_fmt(lyap.get('sum_residual'))}",
            "",
        ]
    normal = art.load("normal_spectrum")
    if normal is not None:
        lines += [
            "## Normal-bundle spectrum",
            "",
            f"- linear: {normal.get('linear', {}).get('exponents')}",
            f"- scaled: {normal.get('scaled', {}).get('exponents')}",
            f"- max difference: {_fmt(normal.get('max_difference'))} (bound {_fmt(normal.get('bound'))})",
            "",
        ]
    bound = art.load("poincare_bound")
    if bound is not None:
        lines += [
            "## Scaled cocycle bound",
            "",
            f"- sup over samples (tau = {_fmt(bound.get('tau'))}): {_fmt(bound.get('bound'))}",
            f"- change when halving the samples: {_fmt(bound.get('relative_change'))}",
            f"- {bound.get('note', '')}",
            "",
        ]
    return lines


def _singularity(art: _Artifacts) -> list[str]:
    data = art.load("singularity")
    if data is None:
        return []
    lines = ["## Singularities", "", "| point | hyperbolic | lorenz-like | min sectional rate |", "|---|---|---|---|"]
    for s in data.get("singularities", []):
        point = ", ".join(_fmt(float(v), 4) for v in s.get("point", []))
        lines.append(
            f"| ({point}) | {_fmt(s.get('hyperbolic'))} | {_fmt(s.get('lorenz_like'))} "
            f"| {_fmt(s.get('min_sectional_rate'))} |"
        )
    return lines + [""]


def _certificates(art: _Artifacts) -> list[str]:
    lines: list[str] = []
    dom = art.load("domination")
    sec = art.load("sectional")
    vol = art.load("volume")
    chk = art.load("checklist")
    cert = art.load("certify")
    if not any(x is not None for x in (dom, sec, vol, chk, cert)):
        return lines
    lines += ["## Certificates", ""]
    if dom is not None:
        tried = dom.get("tried") or [{}]
        last = tried[-1]
        lines.append(
            f"- domination: {dom.get('verdict')} at L = {_fmt(dom.get('L'))}, "
            f"{_fmt(last.get('violation_count'))} violations in {_fmt(last.get('sample_count'))} samples"
        )
        swapped = dom.get("swapped")
        if swapped is not None:
            frac = swapped.get("violation_count", 0) / max(1, swapped.get("sample_count", 0))
            lines.append(f"- swapped splitting violation fraction: {_fmt(frac, 4)}")
    if sec is not None:
        lines.append(
            f"- sectional expansion: {_verdict(sec.get('passed'))} "
            f"(worst plane rate {_fmt(sec.get('worst_plane_rate'))}, mean {_fmt(sec.get('mean_rate'))})"
        )
    if vol is not None:
        lines.append(
            f"- volume hyperbolicity: {_verdict(vol.get('passed'))} "
            f"(E rate {_fmt(vol.get('e_rate'))}, F rate {_fmt(vol.get('f_rate'))})"
        )
    if chk is not None:
        lines.append(f"- Lorenz-like checklist: {_verdict(chk.get('lorenz_like'))}")
    if cert is not None:
        lines.append(
            f"- quasi-hyperbolic arcs: {cert.get('certified')}/{cert.get('attempted')} certified "
            f"(T0 = {_fmt(cert.get('T0'))}, lambda = {_fmt(cert.get('lambda'))}), "
            f"max re-verification drift {_fmt(cert.get('max_relative_drift'))}"
        )
    return lines + [""]


def _entropy(art: _Artifacts) -> list[str]:
    lines: list[str] = []
    ent = art.load("entropy")
    if ent is not None:
        h_lower = float(ent.get("h_lower") or 0.0)
        lines += [
            "## Entropy brackets",
            "",
            f"- h_lower > 0: {_verdict(h_lower > 0)} (h_lower = {_fmt(h_lower)})",
            f"- h_upper = {_fmt(ent.get('h_upper'))}",
            f"- eps grid {ent.get('eps_grid')}, n grid {ent.get('n_grid')}",
        ]
        if ent.get("flags"):
            lines.append(f"- flags: {', '.join(ent['flags'])}")
        lines.append("")
    disk = art.load("disk_volume")
    if disk is not None:
        lines += [
            "## Volume growth of F-disks",
            "",
            f"- v_F = {_fmt(disk.get('v_F'))}",
            f"- max ball-clipped volume slope: {_fmt(disk.get('ball_slope'))}",
            f"- mesh saturated: {_fmt(disk.get('saturated'))}",
            "",
        ]
    exp = art.load("expansiveness")
    if exp is not None:
        lines += [
            "## Expansiveness",
            "",
            f"- collapsed fraction: {_fmt(exp.get('collapsed_fraction'), 4)}",
            f"- max inner spanning slope: {_fmt(exp.get('max_slope'))}",
            f"- {exp.get('note', '')}",
            "",
        ]
    return lines


def _census(art: _Artifacts) -> list[str]:
    data = art.load("census")
    if data is None:
        return []
    counts = data.get("counts") or [0]
    return [
        "## Periodic orbit census",
        "",
        f"- distinct orbits up to T = {_fmt((data.get('T_grid') or [None])[-1])}: {counts[-1]}",
        f"- growth rate: {_fmt(data.get('rate'))}{' (insufficient data)' if data.get('insufficient') else ''}",
        "",
    ]


def _shadowing(art: _Artifacts) -> list[str]:
    data = art.load("shadow")
    if data is None:
        return []
    lines = [
        "## Shadowing",
        "",
        "| period | itinerary | c_bound | d_bound | residual | verdict |",
        "|---|---|---|---|---|---|",
    ]
    for rec in data.get("records", []):
        verdict = rec.get("verification", {}).get("passed")
        lines.append(
            f"| {_fmt(rec.get('period'))} | {rec.get('itinerary') or '-'} | {_fmt(rec.get('c_bound'), 3)} "
            f"| {_fmt(rec.get('d_bound'), 3)} | {_fmt(rec.get('newton_residual'), 2)} | {_verdict(verdict)} |"
        )
    failures = data.get("failures", [])
    if failures:
        lines.append("")
        lines.append(f"{len(failures)} seed(s) did not converge.")
    return lines + [""]


# ----- Entry point -----


def build_report(manifest_path: Path) -> tuple[str, list[str]]:
    """Return (markdown, warnings). Raises ValueError/OSError only for the manifest itself."""
    manifest = load_manifest(manifest_path)
    run_dir = manifest_path if manifest_path.is_dir() else manifest_path.parent
    lines = [
        f"# Run report: {manifest.system}",
        "",
        f"- status: {manifest.status} (exit code {manifest.exit_code})",
        f"- seed {manifest.seed}, tol {_fmt(manifest.tol)}, version {manifest.version}",
        f"- config hash `{manifest.config_hash[:12]}`",
        "",
    ]
    if not manifest.stages:
        lines.append("No stages were run.")
        return "\n".join(lines) + "\n", []

    art = _Artifacts(run_dir, manifest)
    lines += _stage_table(manifest) + [""]
    if manifest.failed_stage:
        record = manifest.stage(manifest.failed_stage)
        witness = record.witness if record is not None else None
        lines += [f"Failed stage: **{manifest.failed_stage}** (witness: `{witness or 'none'}`)", ""]
    for section in (_exponents, _singularity, _certificates, _entropy, _census, _shadowing):
        lines += section(art)
    for name in manifest.artifacts:
        if not (run_dir / name).exists():
            art.warnings.append(f"listed artifact {name} is missing")
    warnings = sorted(set(art.warnings))
    if warnings:
        lines += ["## Warnings", ""] + [f"- {w}" for w in warnings] + [""]
    return "\n".join(lines).rstrip("\n") + "\n", warnings
