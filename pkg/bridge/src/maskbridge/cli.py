"""Command-line entry point for the bridge server."""

from __future__ import annotations

import argparse
import sys

from .config import MODES, TRANSPORTS, BridgeConfig, BridgeError
from .server import BridgeServer, make_http_server


def build_expert(config: BridgeConfig):
    if config.mode == "stub":
        from .stub import StubExpert

        return StubExpert(config)
    from .sam_evf import SamEvfExpert

    return SamEvfExpert(config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskbridge",
        description="Serve point/text segmentation experts over the mask wire protocol.",
    )
    parser.add_argument("--mode", choices=MODES, default="stub")
    parser.add_argument("--transport", choices=TRANSPORTS, default="stdio")
    parser.add_argument("--host", default="127.0.0.1", help="http transport bind host")
    parser.add_argument("--port", type=int, default=0, help="http port; 0 picks a free one")
    parser.add_argument("--cache-size", type=int, default=8, help="image encodings kept")
    parser.add_argument("--width", type=int, default=64, help="stub canvas width")
    parser.add_argument("--height", type=int, default=64, help="stub canvas height")
    parser.add_argument("--sam-checkpoint", help="SAM weights (sam_evf mode)")
    parser.add_argument("--sam-model-type", default="vit_h")
    parser.add_argument("--evf-checkpoint", help="EVF-SAM weights (sam_evf mode)")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = BridgeConfig(
            mode=args.mode,
            sam_checkpoint=args.sam_checkpoint,
            sam_model_type=args.sam_model_type,
            evf_checkpoint=args.evf_checkpoint,
            device=args.device,
            cache_size=args.cache_size,
            width=args.width,
            height=args.height,
        )
        server = BridgeServer(build_expert(config))
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.transport == "stdio":
        try:
            server.serve_stdio()
        except KeyboardInterrupt:
            pass
        return 0
    httpd = make_http_server(server, args.host, args.port)
    host, port = httpd.server_address[:2]
    print(f"listening on http://{host}:{port}/expert", file=sys.stderr, flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
