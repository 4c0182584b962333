import sci_palettes  # type: ignore


PALETTES = sci_palettes.palettes.PALETTES


def get_assignment_colours():
    palette = PALETTES["nejm"]
    return {
        "center": palette["Zest"],
        "hungarian": palette["WildBlueYonder"],
        "hard": palette["DeepCerulean"],
        "quality": palette["TallPoppy"],
    }


def get_assignment_colour(assignment):
    return get_assignment_colours()[assignment]


def get_denoising_colours():
    palette = PALETTES["lancet_lanonc"]
    return {
        "baseline": "grey",
        "embedding": palette["MonaLisa"],
        "center_corner": palette["BondiBlue"],
        "center_outside": palette["TrendyPink"],
    }


def get_denoising_colour(variant):
    return get_denoising_colours()[variant]


def get_layers_cmap():
    return "Blues"
