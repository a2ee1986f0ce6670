"""Bridge entry point.

Examples:
    hsg-bridge --echo --listen 127.0.0.1:7440
    hsg-bridge --model weights.pt --listen 127.0.0.1:7440 --guidance 7.5
    hsg-bridge --model weights.pt --stdio
    hsg-bridge --make-tiny weights.pt          # write a servable checkpoint

Exit codes: 0 clean shutdown, 1 model-load failure or bad flags.
"""

from __future__ import annotations

import argparse
import sys

from .model import create_tiny_checkpoint
from .server import BridgeConfig, DenoiserServer


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsg-bridge",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--model", help="checkpoint path (see --make-tiny)")
    ap.add_argument("--device", default="cpu")
    ap.add_argument("--guidance", type=float, default=7.5,
                    help="classifier-free guidance scale applied server-side")
    ap.add_argument("--listen", help="host:port for TCP serving")
    ap.add_argument("--stdio", action="store_true", help="frame over stdin/stdout")
    ap.add_argument("--echo", action="store_true",
                    help="loopback mode: answer eps_hat = x_t (no model)")
    ap.add_argument("--resolution", type=int, default=None,
                    help="reject inputs that are not this square resolution")
    ap.add_argument("--make-tiny", metavar="PATH",
                    help="write a deterministic tiny checkpoint and exit")
    ap.add_argument("--seed", type=int, default=0, help="seed for --make-tiny")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.make_tiny:
        create_tiny_checkpoint(args.make_tiny, seed=args.seed)
        print(f"wrote {args.make_tiny}")
        return 0
    if not args.echo and not args.model:
        print("error: --model required unless --echo", file=sys.stderr)
        return 1
    if bool(args.listen) == bool(args.stdio):
        print("error: exactly one of --listen / --stdio", file=sys.stderr)
        return 1

    config = BridgeConfig(model_path=args.model, device=args.device,
                          guidance=args.guidance, echo=args.echo,
                          listen=args.listen,
                          expected_resolution=args.resolution)
    try:
        server = DenoiserServer(config)
    except Exception as e:  # model-load failure exits nonzero
        print(f"error: failed to load model: {e}", file=sys.stderr)
        return 1
    if args.stdio:
        server.serve_stdio()
    else:
        server.serve_tcp()
    return 0


if __name__ == "__main__":
    sys.exit(main())
