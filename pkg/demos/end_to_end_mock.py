"""Full pipeline offline: mock sampling, simulated coders, fit, report.

Run ``python3 demos/end_to_end_mock.py [outdir]``. The mock provider answers at
fixed per-cell rates, so the fitted probabilities should sit near them.
"""

import sys
from pathlib import Path

from biaslens.cli import main
from biaslens.labeling import sample_for_double_coding, write_labels
from biaslens.sampler import MOCK_POSITIVE_TEXT, ResponseStore, collect_study, mock_provider
from biaslens.study_config import get_builtin_study

RATES = {("pl", "gpt-3.5"): 0.434, ("sv", "gpt-3.5"): 0.534, ("en", "gpt-3.5"): 0.49,
         ("pl", "gpt-4"): 0.566, ("sv", "gpt-4"): 0.670, ("en", "gpt-4"): 0.959}


def run(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    cfg = get_builtin_study("abortion")
    store = ResponseStore.for_study(out, cfg.study_id)
    prompts = {lang.code: lang.prompt_text for lang in cfg.languages}
    added = collect_study(mock_provider(0, RATES, prompts), cfg, store)
    print(f"collected {sum(added.values())} new responses, {len(store)} in store")

    recs = store.records()
    # coder "ra" reads the mock text exactly; "pi" double-codes 10% and flips one in ten
    write_labels(out / "ra.csv", [(r.record_id, "ra", r.completion_text == MOCK_POSITIVE_TEXT)
                                  for r in recs])
    shared = set(sample_for_double_coding(recs, 0.10, seed=0))
    write_labels(out / "pi.csv", [
        (r.record_id, "pi", (r.completion_text == MOCK_POSITIVE_TEXT) ^ (k % 10 == 0))
        for k, r in enumerate(x for x in recs if x.record_id in shared)])

    labels = [str(out / "ra.csv"), str(out / "pi.csv")]
    main(["reliability", "--labels", *labels, "--responses", str(store.path)])
    main(["fit", "--study", "abortion", "--labels", *labels, "--responses", str(store.path),
          "--out", str(out), "--primary-coder", "ra"])
    main(["report", "--fit", str(out / "abortion.fit.json"), "--out", str(out)])
    return out / f"{cfg.study_id}.report.md"


if __name__ == "__main__":
    report = run(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out"))
    print(report.read_text(encoding="utf-8"))
