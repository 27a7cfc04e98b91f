"""Command-line client for the codec service.

Each subcommand builds a request body and posts it to the service: either a
remote server given with --server, or an in-process instance of the app.
Responses are printed as JSON on stdout; failures print the structured
error body on stderr and exit nonzero.
"""

from __future__ import annotations

import json
import sys
from typing import Optional

import click
import httpx


def _post(server: Optional[str], path: str, payload: dict) -> dict:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            response = client.post(path, json=payload)
            status, body = response.status_code, response.json()
    else:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            from fastapi.testclient import TestClient

        from .service import create_app

        with TestClient(create_app(), raise_server_exceptions=False) as client:
            response = client.post(path, json=payload)
            status, body = response.status_code, response.json()
    if status != 200:
        if not (isinstance(body, dict) and "code" in body):
            body = {"code": "protocol_error", "message": json.dumps(body)}
        click.echo(json.dumps(body, indent=2), err=True)
        sys.exit(1)
    return body


def _emit(body: dict) -> None:
    click.echo(json.dumps(body, indent=2, sort_keys=True))


_FORMAT = click.Choice(["image-pair", "raw-yuv420"])


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Base URL of a running devc service; default runs in-process.")
@click.pass_context
def main(ctx: click.Context, server: Optional[str]) -> None:
    """Learned P-frame video codec."""
    ctx.obj = server


@main.command()
@click.option("--ref", "ref_path", required=True, type=click.Path())
@click.option("--target", "target_path", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--format", "fmt", type=_FORMAT, default="image-pair", show_default=True)
@click.option("--width", type=int, default=None, help="Frame width for raw-yuv420 input.")
@click.option("--height", type=int, default=None, help="Frame height for raw-yuv420 input.")
@click.option("--force-bypass", is_flag=True, help="Code the plain frame difference.")
@click.option("--force-mc", is_flag=True, help="Force motion-compensated mode.")
@click.pass_obj
def encode(server, ref_path, target_path, model_path, out_path, fmt, width, height,
           force_bypass, force_mc):
    """Encode a target frame against its reference."""
    if force_bypass and force_mc:
        click.echo(json.dumps({"code": "config_error",
                               "message": "--force-bypass and --force-mc are exclusive"}),
                   err=True)
        sys.exit(1)
    force_mode = "bypass" if force_bypass else "mc" if force_mc else None
    _emit(_post(server, "/encode", {
        "ref_path": ref_path, "target_path": target_path, "model_path": model_path,
        "out_path": out_path, "fmt": fmt, "width": width, "height": height,
        "force_mode": force_mode,
    }))


@main.command()
@click.option("--ref", "ref_path", required=True, type=click.Path())
@click.option("--in", "bitstream_path", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Reconstruction written as raw planar YUV420.")
@click.option("--format", "fmt", type=_FORMAT, default="image-pair", show_default=True)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.pass_obj
def decode(server, ref_path, bitstream_path, model_path, out_path, fmt, width, height):
    """Decode a bitstream against its reference frame."""
    _emit(_post(server, "/decode", {
        "ref_path": ref_path, "bitstream_path": bitstream_path,
        "model_path": model_path, "out_path": out_path,
        "fmt": fmt, "width": width, "height": height,
    }))


@main.command()
@click.option("--stage", required=True, type=click.Choice(["me", "s1", "s2", "s3"]))
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--init", "checkpoint_in", default=None, type=click.Path(),
              help="Checkpoint of the prerequisite stage.")
@click.option("--out", "checkpoint_out", required=True, type=click.Path())
@click.option("--log", "log_path", default=None, type=click.Path(),
              help="Append step,loss,D,R,lambda rows to this CSV.")
@click.pass_obj
def train(server, stage, config_path, checkpoint_in, checkpoint_out, log_path):
    """Run one training stage and save its checkpoint."""
    _emit(_post(server, "/train", {
        "stage": stage, "config_path": config_path, "checkpoint_in": checkpoint_in,
        "checkpoint_out": checkpoint_out, "log_path": log_path,
    }))


@main.command(name="eval")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--budget", "budget_bytes", type=int, default=3_900_000_000,
              show_default=True, help="Corpus byte budget.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--format", "fmt", type=_FORMAT, default="image-pair", show_default=True)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--metric-planes", type=click.Choice(["yuv", "y"]), default="yuv",
              show_default=True)
@click.pass_obj
def evaluate(server, manifest_path, model_path, budget_bytes, out_dir, fmt,
             width, height, metric_planes):
    """Encode, decode, and score every pair in a manifest."""
    body = _post(server, "/eval", {
        "manifest_path": manifest_path, "model_path": model_path,
        "budget_bytes": budget_bytes, "out_dir": out_dir, "fmt": fmt,
        "width": width, "height": height, "metric_planes": metric_planes,
    })
    _emit(body)
    if body.get("failures"):
        sys.exit(1)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the codec service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
