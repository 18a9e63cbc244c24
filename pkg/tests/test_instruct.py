"""Grammar parsing, object resolution, caption aggregation."""

import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2r.dataset import SceneObject
from d2r.instruct import (RELATION_KEYWORDS, Instruction, ParseError,
                          aggregate_captions, parse_instruction)


def obj(oid, caption):
    return SceneObject(oid, [caption], caption)


SCENE = [obj("apple", "an apple"), obj("bowl", "a bowl"),
         obj("cup", "a green cup"), obj("fork", "a silver fork")]


def contains_keyword(text: str) -> bool:
    for kw in RELATION_KEYWORDS:
        if re.search(rf"\b{re.escape(kw)}\b", text.lower()):
            return True
    return False


class TestParse:
    def test_apple_inside_bowl_captions(self):
        parsed = parse_instruction(Instruction("put the apple inside the bowl"), SCENE)
        assert parsed.task.goal_caption == "an apple inside a bowl"
        assert parsed.task.normalizing_caption == "an apple and a bowl"
        assert parsed.task.movable_object_id == "apple"
        assert set(parsed.task.relevant_object_ids) == {"apple", "bowl"}

    def test_distractors_are_the_complement(self):
        parsed = parse_instruction(Instruction("put the apple inside the bowl"), SCENE)
        assert set(parsed.distractor_ids) == {"cup", "fork"}
        assert set(parsed.distractor_ids) | set(parsed.task.relevant_object_ids) \
            == {o.object_id for o in SCENE}
        assert not set(parsed.distractor_ids) & set(parsed.task.relevant_object_ids)

    def test_unknown_relation_is_grammar_error(self):
        with pytest.raises(ParseError, match="grammar"):
            parse_instruction(Instruction("put the apple blorp the bowl"), SCENE)

    def test_unresolvable_phrase_lists_candidates(self):
        with pytest.raises(ParseError, match="candidates"):
            parse_instruction(Instruction("put the banana inside the bowl"), SCENE)

    def test_ambiguous_phrase_is_an_error(self):
        scene = SCENE + [obj("cup2", "a blue cup")]
        with pytest.raises(ParseError, match="ambiguous"):
            parse_instruction(Instruction("put the cup beside the bowl"), scene)

    def test_longest_overlap_wins(self):
        scene = [obj("b1", "a blue glass bottle"), obj("b2", "a green glass bottle"),
                 obj("plant", "a potted plant")]
        parsed = parse_instruction(
            Instruction("put the green bottle near the plant"), scene)
        assert parsed.task.movable_object_id == "b2"

    def test_shape_grammar_matches_plural_group(self):
        scene = [obj("black", "a black pool ball"), obj("b1", "a red pool ball"),
                 obj("b2", "a yellow pool ball"), obj("cue", "a wooden cue stick")]
        parsed = parse_instruction(
            Instruction("put the black ball in a triangle with the other balls"), scene)
        assert parsed.task.movable_object_id == "black"
        assert set(parsed.task.relevant_object_ids) == {"black", "b1", "b2"}
        assert parsed.distractor_ids == ["cue"]
        assert "triangle" in parsed.task.goal_caption

    def test_multiword_relation(self):
        scene = [obj("bottle", "a green bottle"), obj("book", "a red book")]
        parsed = parse_instruction(
            Instruction("put the bottle in front of the book"), scene)
        assert "in front of" in parsed.task.goal_caption

    def test_movable_always_relevant(self):
        for instr in ["put the apple inside the bowl",
                      "put the apple beside the bowl",
                      "put the fork near the cup"]:
            parsed = parse_instruction(Instruction(instr), SCENE)
            assert parsed.task.movable_object_id in parsed.task.relevant_object_ids

    def test_goal_has_relation_normalizing_does_not(self):
        instructions = ["put the apple inside the bowl",
                        "put the apple on the bowl",
                        "put the fork to the left of the cup",
                        "put the cup near the bowl"]
        for instr in instructions:
            parsed = parse_instruction(Instruction(instr), SCENE)
            assert contains_keyword(parsed.task.goal_caption), instr
            assert not contains_keyword(parsed.task.normalizing_caption), instr

    def test_determinism(self):
        a = parse_instruction(Instruction("put the apple inside the bowl"), SCENE)
        b = parse_instruction(Instruction("put the apple inside the bowl"), SCENE)
        assert a.task == b.task and a.distractor_ids == b.distractor_ids

    def test_empty_instruction_rejected(self):
        with pytest.raises(ParseError):
            Instruction("   ")

    def test_missing_aggregated_caption_rejected(self):
        scene = [SceneObject("apple", ["an apple"], ""), obj("bowl", "a bowl")]
        with pytest.raises(ParseError, match="aggregated"):
            parse_instruction(Instruction("put the apple inside the bowl"), scene)


class TestAggregate:
    def test_majority(self):
        assert aggregate_captions(["a red apple", "a red apple", "an apple"]) \
            == "a red apple"

    def test_singleton(self):
        assert aggregate_captions(["a cup"]) == "a cup"

    def test_tie_longest_then_lexicographic(self):
        assert aggregate_captions(["a cup", "a mug"]) == "a cup"     # equal length
        assert aggregate_captions(["a teacup", "a cup"]) == "a teacup"

    def test_tie_is_stable(self):
        views = ["a bowl", "a blue bowl", "a bowl", "a blue bowl"]
        assert all(aggregate_captions(views) == aggregate_captions(views)
                   for _ in range(5))

    def test_normalization_of_case_and_spaces(self):
        assert aggregate_captions(["A  Red Apple", "a red apple", "an apple"]) \
            == "a red apple"

    def test_empty_rejected(self):
        with pytest.raises(ParseError):
            aggregate_captions([])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["a cup", "a mug", "a tall glass", "a bottle"]),
                min_size=1, max_size=8))
def test_aggregate_always_returns_member(views):
    winner = aggregate_captions(views)
    assert winner in {v.lower() for v in views}
