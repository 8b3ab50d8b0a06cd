"""Text templates for captions, QA items and chain-of-thought targets.

Every template is a ``str.format`` pattern whose placeholders are filled from
the finite filler lists below, so the token vocabulary is closed and can be
enumerated by :func:`vocabulary_words`.
"""

from __future__ import annotations

import re

VELOCITY_ACTIONS = ("MaintainSpeed", "Accelerate", "Decelerate")
DIRECTION_ACTIONS = ("GoStraight", "TurnLeft", "TurnRight", "ChangeLaneLeft", "ChangeLaneRight", "Stop")

MAX_NUMBER = 40

# -- captions ---------------------------------------------------------------
CAPTION_PROMPT = "<image> describe the scene."
CAPTION = "{road}. there {be_v} {n_vehicles} {vehicle_word} and {n_peds} {ped_word}. {buildings}."
ROAD_PHRASES = {
    "straight": "a straight road with {lanes} lanes",
    "intersection": "an intersection ahead on a road with {lanes} lanes",
    "junction_left": "a side road joins from the left on a road with {lanes} lanes",
    "junction_right": "a side road joins from the right on a road with {lanes} lanes",
}
BUILDING_PHRASES = ("no buildings nearby", "buildings on the left", "buildings on the right", "buildings on both sides")

# -- question answering -----------------------------------------------------
QA_PROMPT = "<image> question: {question}"
QA_QUESTIONS = {
    ("exist", "h0"): "Is there a {kind}?",
    ("exist", "h1"): "Is there a {kind} {region} the ego vehicle?",
    ("count", "h0"): "How many {kinds} are there?",
    ("count", "h1"): "How many {kinds} are {region} the ego vehicle?",
    ("object", "h0"): "What is the closest object to the ego vehicle?",
    ("object", "h1"): "What is the closest object {region} the ego vehicle?",
    ("status", "h0"): "Is the closest vehicle moving or parked?",
    ("status", "h1"): "Is the closest vehicle {region} the ego vehicle moving or parked?",
    ("comparison", "h0"): "Are there more vehicles than pedestrians?",
    ("comparison", "h1"): "Which side has the closer vehicle, left or right?",
}
QA_KINDS = ("vehicle", "pedestrian")
QA_KINDS_PLURAL = {"vehicle": "vehicles", "pedestrian": "pedestrians"}
QA_REGIONS = ("to the left", "to the right", "in front", "behind")
# how each region reads before "the ego vehicle"
QA_REGION_PHRASES = {"to the left": "to the left of", "to the right": "to the right of", "in front": "in front of",
                     "behind": "behind"}
QA_ANSWERS = ("yes", "no", "vehicle", "pedestrian", "nothing", "moving", "parked", "none", "left", "right", "same")

# -- chain of thought -------------------------------------------------------
COT_PROMPT = "<image> history: {history}. predict the next meta action."
COT_NO_HISTORY = "none"
COT_SCENE = "scene: {road}. {lead}."
COT_LEAD = (
    "the lane ahead is clear",
    "a vehicle is stopped {dist} m ahead in the ego lane",
    "a vehicle is moving {dist} m ahead in the ego lane",
)
COT_INTENT = "intent: the ego was {past}, so it will {future}."
COT_INTENT_NO_HISTORY = "intent: with no history the ego will {future}."
COT_META = "META: {velocity}|{direction}"

PAST_VELOCITY = {"MaintainSpeed": "keeping its speed", "Accelerate": "speeding up", "Decelerate": "slowing down"}
PAST_DIRECTION = {
    "GoStraight": "going straight",
    "TurnLeft": "turning left",
    "TurnRight": "turning right",
    "ChangeLaneLeft": "changing lane to the left",
    "ChangeLaneRight": "changing lane to the right",
    "Stop": "stopped",
}
FUTURE_VELOCITY = {"MaintainSpeed": "keep its speed", "Accelerate": "speed up", "Decelerate": "slow down"}
FUTURE_DIRECTION = {
    "GoStraight": "go straight",
    "TurnLeft": "turn left",
    "TurnRight": "turn right",
    "ChangeLaneLeft": "change lane to the left",
    "ChangeLaneRight": "change lane to the right",
    "Stop": "stay stopped",
}

TOKEN_RE = re.compile(r"<\w+>|\w+|[^\w\s]")


def tokenize_words(text: str) -> list[str]:
    return TOKEN_RE.findall(text)


def vocabulary_words() -> set[str]:
    """All word tokens any template can produce."""
    texts = [CAPTION_PROMPT, CAPTION, QA_PROMPT, COT_PROMPT, COT_NO_HISTORY, COT_SCENE, COT_INTENT,
             COT_INTENT_NO_HISTORY, COT_META, "is are vehicle vehicles pedestrian pedestrians , ."]
    texts += list(ROAD_PHRASES.values()) + list(BUILDING_PHRASES) + list(QA_QUESTIONS.values())
    texts += list(QA_KINDS) + list(QA_KINDS_PLURAL.values()) + list(QA_REGION_PHRASES.values()) + list(QA_ANSWERS)
    texts += list(COT_LEAD) + list(VELOCITY_ACTIONS) + list(DIRECTION_ACTIONS)
    for table in (PAST_VELOCITY, PAST_DIRECTION, FUTURE_VELOCITY, FUTURE_DIRECTION):
        texts += list(table.values())
    texts += [str(i) for i in range(MAX_NUMBER + 1)]
    words: set[str] = set()
    for t in texts:
        stripped = re.sub(r"\{\w+\}", " ", t)
        words.update(tokenize_words(stripped))
    return words
