"""Command line: ``wdro run|validate|attack-eval``.

Exit codes: 0 success, 1 pipeline failure, 2 invalid manifest or usage.
"""
from __future__ import annotations

import argparse
import json
import sys

from .harness import OUTPUT_ENV, ManifestError, PipelineError, attack_eval, run_manifest, validate_manifest

EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wdro", description="Wasserstein-robust training experiments.")
    sub = ap.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="execute a manifest")
    run.add_argument("manifest")
    run.add_argument("-o", "--output-dir", help=f"override output_dir (also: ${OUTPUT_ENV})")
    run.add_argument("-q", "--quiet", action="store_true")

    val = sub.add_parser("validate", help="check a manifest and list every problem")
    val.add_argument("manifest")

    ae = sub.add_parser("attack-eval", help="evaluate a checkpoint over the manifest's attack grid")
    ae.add_argument("checkpoint")
    ae.add_argument("manifest")
    ae.add_argument("-o", "--output-dir")
    return ap


def _report(err: ManifestError) -> int:
    for d in err.diagnostics:
        print(f"invalid: {d}", file=sys.stderr)
    return EXIT_INVALID


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.verb == "validate":
        try:
            diags = validate_manifest(args.manifest)
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INVALID
        for d in diags:
            print(d)
        if not diags:
            print(f"{args.manifest}: ok")
        return EXIT_OK if not diags else EXIT_INVALID

    try:
        if args.verb == "run":
            log = None if args.quiet else (lambda s: print(s, file=sys.stderr, flush=True))
            res = run_manifest(args.manifest, args.output_dir, log)
            print(f"wrote {len(res.files)} files under {res.output_dir}")
        else:
            res = attack_eval(args.checkpoint, args.manifest, args.output_dir)
            print(json.dumps(res.summary, indent=1))
    except ManifestError as e:
        return _report(e)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except PipelineError as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
