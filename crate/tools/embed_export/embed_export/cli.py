import argparse
import sys

from .export import DEFAULT_PROMPTS, ExportJob, export_image_features, export_prompt_embeddings


def main(argv=None):
    p = argparse.ArgumentParser(prog="embed-export")
    sub = p.add_subparsers(dest="cmd", required=True)
    img = sub.add_parser("images")
    img.add_argument("--manifest", required=True)
    img.add_argument("--checkpoint", required=True, help="<arch>:<pretrained>, e.g. RN50:openai")
    img.add_argument("--out", required=True)
    img.add_argument("--kind", choices=["global", "feature-map"], default="global")
    img.add_argument("--batch-size", type=int, default=32)
    img.add_argument("--image-root")
    pr = sub.add_parser("prompts")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--text", action="append", help="repeat 5 times in grade order")
    args = p.parse_args(argv)

    from .clip_encoder import OpenClipEncoder

    enc = OpenClipEncoder(args.checkpoint)
    if args.cmd == "images":
        job = ExportJob(args.manifest, args.checkpoint, args.out, args.kind, args.batch_size, args.image_root)
        res = export_image_features(job, enc)
        print(f"exported {len(res.exported)}, exceptions {len(res.exceptions)}", file=sys.stderr)
    else:
        export_prompt_embeddings(args.text or DEFAULT_PROMPTS, enc, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
