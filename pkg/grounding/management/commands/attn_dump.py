from grounding.data import collate
from grounding.losses import Box
from grounding.management.base import GroundingCommand
from grounding.pipeline import load_trained
from grounding.synthetic import find_sample, read_dataset
from grounding.utils import format_box, output_dir, write_heatmap_csv, write_pgm


class Command(GroundingCommand):
    help = 'Write the [REG] attention over visual tokens of every V-L layer as PGM and CSV heatmaps'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, help='Trained model checkpoint')
        parser.add_argument('--dataset', required=True, help='Dataset directory with samples.jsonl')
        parser.add_argument('--sample-id', required=True, help='Sample to visualize')
        parser.add_argument('--out', help='Output directory (default: GROUNDING_OUTPUT_DIR)')

    def run(self, **options):
        trained = load_trained(options['checkpoint'])
        sample = find_sample(read_dataset(options['dataset']), options['sample_id'])
        out = output_dir(options['out'])

        prediction = trained.model(collate([sample], trained.vocab, trained.config.model))
        heatmaps = prediction.heatmaps[0]
        height, width = sample.pixels.shape[:2]
        pred = [float(v) for v in prediction.boxes.data[0]]

        lines = [
            f"sample_id={sample.sample_id}",
            f"expression={sample.expression}",
            f"grid={heatmaps.shape[1]}x{heatmaps.shape[2]}",
            f"pred={format_box(pred)}",
            f"gt={format_box(sample.box.as_list())}",
            f"pred_pixels={format_box(Box(*pred).to_pixels(width, height))}",
            f"gt_pixels={format_box(sample.box.to_pixels(width, height))}",
        ]
        for layer, heatmap in enumerate(heatmaps, start=1):
            stem = f"{sample.sample_id}_layer{layer}"
            scale = write_pgm(out / f"{stem}.pgm", heatmap)
            write_heatmap_csv(out / f"{stem}.csv", heatmap)
            lines.append(f"layer{layer}={stem}.pgm csv={stem}.csv scale={scale:.6f}")
            self.stdout.write(f"layer {layer}: {out / stem}.pgm, {out / stem}.csv")

        sidecar = out / f"{sample.sample_id}_boxes.txt"
        sidecar.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(heatmaps)} heatmaps and {sidecar}"))