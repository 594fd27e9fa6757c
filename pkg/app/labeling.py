# labeling.py

LABEL_FORMATS = {
    "potential": "{name} (d={d}, {declared_class})",
    "kernel": "{model} cutoff Lambda={cutoff} m={m} ({order} k-nodes/axis)",
    "kernel_free": "no field (alpha=0)",
    "run": "{op} {experiment} seed={seed}",
    "envelope": "{case}: C1={C1:.4g} C2={C2:.4g} |x|^{beta_exp:g}",
    "table": "variable-mass tables h={h} ({order} k-nodes/axis)",
}


def generate_label(item):
    """
    Human-readable label for a report item. The item dict is expected to have
    a "type" key.
    """
    item_type = item.get("type", "").lower()

    if item_type == "potential":
        return LABEL_FORMATS["potential"].format(name=item.get("name", "V"), d=item.get("d", "?"),
                                                 declared_class=item.get("declared_class", "unclassified"))
    elif item_type == "kernel":
        if item.get("model") in (None, "none"):
            return LABEL_FORMATS["kernel_free"]
        return LABEL_FORMATS["kernel"].format(model=item["model"], cutoff=item.get("cutoff", "?"),
                                              m=item.get("m", 0.0), order=item.get("order", "?"))
    elif item_type == "run":
        return LABEL_FORMATS["run"].format(op=item.get("op", "?"), experiment=item.get("experiment", "?"),
                                           seed=item.get("seed", "?"))
    elif item_type == "envelope":
        return LABEL_FORMATS["envelope"].format(case=item["case"], C1=item["C1"], C2=item["C2"],
                                                beta_exp=item["beta_exp"])
    elif item_type == "table":
        return LABEL_FORMATS["table"].format(h=item.get("h", "?"), order=item.get("order", "?"))

    # Fallback label
    return item.get("label", "unlabeled")
