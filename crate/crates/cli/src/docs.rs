pub const FORMATS: &str = r#"# aacl file formats

All files are UTF-8 JSON unless noted. Floats are written in shortest
round-trip form.

## Embedding file

Produced by an external encoder export, read by `build-repo --embeddings`.

    {"dim": D, "text": {phrase: [D floats]}, "image": {id: [D floats]}}

- `dim` is a positive integer and every vector has exactly `dim` entries.
- Values are finite and no vector has zero norm.
- Phrases and ids are NFC-normalised on load; a key that appears twice after
  normalisation is an error.
- Concept phrases use the template `a photo of a {label}`. Action phrases
  (`go up`, `turn left`, ...) and action-object phrases (`turn left kitchen`)
  are looked up as given.
- Image ids of generated worlds are `{world id}/{node}/{view}`.
- Vectors are stored raw; they are normalised only inside cosine similarity.

Example:

```json
{
  "dim": 3,
  "text": {
    "a photo of a kitchen": [0.12, -0.5, 0.83],
    "turn left": [0.9, 0.1, 0.0]
  },
  "image": {
    "w0/3/2": [0.2, -0.41, 0.77]
  }
}
```

## World (`gen-world`)

    {"format_version": 1, "id", "seed", "n_levels",
     "nodes": [{"id", "level", "x", "y", "room"}],
     "edges": [{"from", "to", "view", "heading", "elevation", "length"}],
     "views": [[{"heading", "elevation", "label", "target"}]]}

Edges are directed and stored in both directions. `views[n]` lists the
panorama of node `n`; `target` is the neighbour reached through a view or
null. Headings are radians in [0, 2pi), elevations in [-pi/2, pi/2].

## Episodes (`gen-episodes`)

    {"format_version": 1, "episodes": [{"id", "world_id", "split", "start",
      "goal", "start_heading": {"heading", "elevation"}, "gt_path": [nodes],
      "instruction": [{"action", "object"}]}]}

Each instruction step names the action concept and the label of the view
taken; the last step is `{"action": "stop", "object": null}`.

## Concept repository (`build-repo`)

    {"concepts": [{"label", "phrase"}]}

Sorted by label. Text features are recomputed from the provider on load.

## Training run (`train --out DIR`)

- `config.toml`: the full configuration, every key written out.
- `metrics.jsonl`: one line per epoch and validation split:
  `{"epoch", "split", "NE", "TL", "SR", "SPL", "episodes",
  "losses": {"rl", "il", "contrast", "total"}}`.
- `checkpoint.json`: `{"format_version": 1, "mode", "dims", "params"}` where
  `dims` records `dim`, `d_model`, `scorer_hidden`, `adapter_hidden`, `steps`
  and `tokens`, and every matrix in `params` is `{"rows", "cols", "data"}`
  with `data` row-major. Loading under a config with different dims fails.

## Trace (`trace`, `eval --trace`)

Line-delimited JSON, one record per decision:

    {"episode_id", "step", "node", "chosen", "value", "attention": [..],
     "candidates": [{"view", "target", "action", "score", "prob",
                     "objects": [{"label", "p", "p_tilde"}]}]}

`p` is the concept-mapping probability, `p_tilde` the re-ranked one (null
when re-ranking is off). The stop candidate has `view` and `target` null and
no objects.
"#;
