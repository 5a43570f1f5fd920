#!/usr/bin/env python3
"""End-to-end checks of the covmerge command-line tool."""

import subprocess
import sys
import tempfile
from pathlib import Path

CLI = Path(sys.argv[1]).resolve()
failures = []


def run(*args, expect=0):
    proc = subprocess.run([str(CLI), *args], capture_output=True, text=True)
    if proc.returncode != expect:
        failures.append(
            f"{' '.join(args)}: exit {proc.returncode}, expected {expect}\n"
            f"stdout: {proc.stdout}\nstderr: {proc.stderr}"
        )
    return proc


def check(cond, message):
    if not cond:
        failures.append(message)


def main():
    # Cost model output is bare integers on stdout.
    out = run("flops", "--method", "actmat", "--t", "2", "--n", "10")
    check(out.stdout.strip() == "7400", f"flops actmat: {out.stdout!r}")
    out = run("flops", "--method", "average", "--t", "3", "--n", "10")
    check(out.stdout.strip() == "300", f"flops average: {out.stdout!r}")
    out = run("flops", "--method", "regmean", "--t", "2", "--n", "10")
    check(out.stdout.strip() == "5200", f"flops regmean: {out.stdout!r}")
    out = run("flops", "--method", "regmean", "--t", "2", "--n", "10", "--l", "100",
              "--preprocess")
    check(out.stdout.strip() == "39800", f"flops regmean preprocess: {out.stdout!r}")

    # Usage errors exit with 2, bad input values with 3.
    run("flops", "--t", "2", "--n", "10", expect=2)
    run("definitely-not-a-subcommand", expect=2)
    run("merge", expect=2)
    run("flops", "--method", "ties", "--t", "1", "--n", "1", expect=3)
    run("merge", "--pretrained", "/nonexistent.ckpt.st", "--experts", "/nonexistent.ckpt.st",
        "--out", "/tmp/x.ckpt.st", expect=3)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        toy = tmp / "toy"
        out = run("train-toy", "--seed", "3", "--tasks", "2", "--widths", "4,6", "--steps",
                  "6", "--eta", "0.05", "--out-dir", str(toy))
        check(out.stdout.startswith("task,final_loss"), f"train-toy header: {out.stdout!r}")
        for name in ["scenario.cfg", "pretrained.ckpt.st", "expert-0.ckpt.st",
                     "expert-1.ckpt.st", "traces-0.ckpt.st", "cov-actmat-0.ckpt.st",
                     "cov-empirical-1.ckpt.st"]:
            check((toy / name).exists(), f"train-toy missing {name}")

        # Merge through flags, then through a config file with a flag override.
        merged = tmp / "merged.ckpt.st"
        experts = f"{toy}/expert-0.ckpt.st,{toy}/expert-1.ckpt.st"
        run("merge", "--method", "actmat", "--pretrained", str(toy / "pretrained.ckpt.st"),
            "--experts", experts, "--out", str(merged))
        check(merged.exists(), "merged checkpoint not written")

        config = tmp / "merge.cfg"
        config.write_text(
            "[merge]\n"
            f"pretrained = {toy}/pretrained.ckpt.st\n"
            f"experts = {experts}\n"
            f"out = {tmp}/merged2.ckpt.st\n"
            "method = average\n"
        )
        run("merge", "--config", str(config), "--method", "tsv")
        check((tmp / "merged2.ckpt.st").exists(), "config-driven merge not written")

        covs = f"{toy}/cov-empirical-0.ckpt.st,{toy}/cov-empirical-1.ckpt.st"
        run("merge", "--method", "regmean", "--pretrained", str(toy / "pretrained.ckpt.st"),
            "--experts", experts, "--covariances", covs, "--out", str(tmp / "merged3.ckpt.st"))

        # Diagnostics over the training artifacts.
        out = run("diagnose", "--report", "angles", "--traces", str(toy / "traces-0.ckpt.st"),
                  "--pretrained", str(toy / "pretrained.ckpt.st"),
                  "--expert", str(toy / "expert-0.ckpt.st"), "--csv", str(tmp / "t1.csv"))
        check("bound_satisfied=1" in out.stdout, f"angles bound: {out.stdout!r}")
        check((tmp / "t1.csv").read_text().startswith(
            "layer,k,drift_angle,eps_cross,eps_corr,eps_drift,lhs_angle"), "angles csv header")

        out = run("diagnose", "--report", "kappa",
                  "--empirical", f"{toy}/cov-empirical-0.ckpt.st,{toy}/cov-empirical-1.ckpt.st",
                  "--actmat", f"{toy}/cov-actmat-0.ckpt.st,{toy}/cov-actmat-1.ckpt.st")
        check("kappa-summary" in out.stdout, f"kappa summary missing: {out.stdout!r}")

        out = run("diagnose", "--report", "pearson", "--traces", str(toy / "traces-0.ckpt.st"))
        check("pearson layer=" in out.stdout, f"pearson record missing: {out.stdout!r}")

        out = run("diagnose", "--report", "cosine",
                  "--empirical", f"{toy}/cov-empirical-0.ckpt.st",
                  "--actmat", f"{toy}/cov-actmat-0.ckpt.st")
        check("cos_estimate=" in out.stdout, f"cosine record missing: {out.stdout!r}")

        out = run("diagnose", "--report", "transfer", "--scenario", str(toy / "scenario.cfg"),
                  "--task", "0")
        check("holds=1" in out.stdout, f"transfer bound: {out.stdout!r}")

        # Corrupt container reports a format error (exit 3).
        bad = tmp / "bad.ckpt.st"
        bad.write_bytes(b"\xff\xff\xff\xff\xff\xff\xff\xff")
        run("merge", "--pretrained", str(bad), "--experts", str(bad), "--out",
            str(tmp / "never.ckpt.st"), expect=3)

        # Divergent training is a numerical failure (exit 4).
        out = run("train-toy", "--seed", "1", "--tasks", "1", "--widths", "4,4", "--steps",
                  "200", "--eta", "1e6", "--out-dir", str(tmp / "diverge"), expect=4)
        check("diverged" in out.stderr, f"divergence message: {out.stderr!r}")

    # Bench CSV shape.
    out = run("bench", "--n", "12", "--t", "2", "--methods", "average,actmat", "--repeats", "2")
    lines = out.stdout.strip().splitlines()
    check(lines[0] == "method,t,n,repeats,median_ms,iqr_ms,expensive_ops,status",
          f"bench header: {lines[0]!r}")
    check(len(lines) == 3, f"bench rows: {lines!r}")

    # The invariant suite is deterministic for a fixed seed.
    first = run("verify", "--seed", "7")
    second = run("verify", "--seed", "7")
    check(first.stdout == second.stdout, "verify output differs between identical runs")
    check(first.stdout.count("PASS") == 13, f"verify expected 13 passes:\n{first.stdout}")

    if failures:
        print("CLI TEST FAILURES:")
        for f in failures:
            print(" -", f)
        return 1
    print("cli tests passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
