"""Annotation study: sampling, session logic, export, aggregates, HTTP."""

import json
import threading
import urllib.error
import urllib.request
from fractions import Fraction

import pytest

from helpers import build_manifest
from monoedit.annotation import (
    AggregateCell,
    AnnotationItem,
    AnnotationSession,
    InvalidRatingError,
    Rating,
    UnknownItemError,
    aggregate_ratings,
    aggregate_table,
    build_annotation_items,
    build_server,
    export_text,
    load_items,
    parse_export,
    save_items,
)
from monoedit.core import AttributeCategory, Feasibility, FilterStatus
from monoedit.prompts import render_prompt


def make_item(image_id, category=AttributeCategory.COLOR, feasibility=Feasibility.FEASIBLE):
    return AnnotationItem(
        image_id=image_id,
        prompt_text=f"prompt for {image_id}",
        category=category,
        claimed_feasibility=feasibility,
    )


def rating(annotator, image_id, correct=True, naturalness=4, timestamp="t"):
    return Rating(
        annotator_id=annotator,
        image_id=image_id,
        feasibility_correct=correct,
        naturalness=naturalness,
        timestamp=timestamp,
    )


class TestSampling:
    def test_stratified_per_cell(self):
        manifest = build_manifest(n_real_per_class=4, n_syn_per_class=6)
        items = build_annotation_items(manifest, per_cell=2, seed=0)
        assert len(items) == 4  # 2 cells (color x feasible/infeasible) x 2
        by_feas = {}
        for item in items:
            assert item.category is AttributeCategory.COLOR
            by_feas.setdefault(item.claimed_feasibility, []).append(item.image_id)
        assert len(by_feas[Feasibility.FEASIBLE]) == 2
        assert len(by_feas[Feasibility.INFEASIBLE]) == 2

    def test_cell_order_and_sorted_ids(self):
        manifest = build_manifest(n_real_per_class=4, n_syn_per_class=6)
        items = build_annotation_items(manifest, per_cell=3, seed=1)
        feas = [i.claimed_feasibility for i in items]
        assert feas == [Feasibility.FEASIBLE] * 3 + [Feasibility.INFEASIBLE] * 3
        first = [i.image_id for i in items[:3]]
        assert first == sorted(first)

    def test_deterministic_and_seed_sensitive(self):
        manifest = build_manifest(n_real_per_class=4, n_syn_per_class=12)
        a = build_annotation_items(manifest, per_cell=3, seed=5)
        b = build_annotation_items(manifest, per_cell=3, seed=5)
        assert a == b
        seen = {
            tuple(i.image_id for i in build_annotation_items(manifest, per_cell=3, seed=s))
            for s in range(6)
        }
        assert len(seen) > 1

    def test_per_cell_capped_by_pool(self):
        manifest = build_manifest(n_real_per_class=4, n_syn_per_class=4)
        items = build_annotation_items(manifest, per_cell=100, seed=0)
        assert len(items) == 8  # every accepted synthetic, nothing invented

    def test_only_accepted_synthetics_sampled(self):
        manifest = build_manifest(
            n_real_per_class=4, n_syn_per_class=4, syn_status=FilterStatus.REJECTED
        )
        assert build_annotation_items(manifest, per_cell=2, seed=0) == []

    def test_prompt_text_is_rendered_prompt(self):
        manifest = build_manifest(n_real_per_class=4, n_syn_per_class=4)
        items = build_annotation_items(manifest, per_cell=1, seed=0)
        record = manifest.image_by_id(items[0].image_id)
        prompt = manifest.prompt_by_id(record.prompt_id)
        entry = manifest.class_by_id(record.class_id)
        assert items[0].prompt_text == render_prompt(prompt, entry)

    def test_per_cell_must_be_positive(self):
        manifest = build_manifest(n_real_per_class=4, n_syn_per_class=4)
        with pytest.raises(ValueError):
            build_annotation_items(manifest, per_cell=0, seed=0)

    def test_items_round_trip_through_file(self, tmp_path):
        manifest = build_manifest(n_real_per_class=4, n_syn_per_class=4)
        items = build_annotation_items(manifest, per_cell=2, seed=0)
        path = tmp_path / "items.jsonl"
        save_items(items, path)
        assert tuple(load_items(path)) == tuple(items)


class TestRatingValidation:
    def test_naturalness_bounds(self):
        for value in (1, 2, 3, 4, 5):
            rating("a", "x", naturalness=value)
        for value in (0, 6, -1):
            with pytest.raises(InvalidRatingError):
                rating("a", "x", naturalness=value)

    def test_naturalness_must_be_integer(self):
        with pytest.raises(InvalidRatingError):
            rating("a", "x", naturalness=3.5)
        with pytest.raises(InvalidRatingError):
            rating("a", "x", naturalness=True)

    def test_feasibility_correct_must_be_bool(self):
        with pytest.raises(InvalidRatingError):
            rating("a", "x", correct="yes")

    def test_ids_must_be_non_empty(self):
        with pytest.raises(InvalidRatingError):
            rating("", "x")
        with pytest.raises(InvalidRatingError):
            rating("a", "")

    def test_payload_round_trip(self):
        r = rating("alice", "img-1", correct=False, naturalness=2)
        assert Rating.from_payload(r.to_payload()) == r

    def test_payload_missing_field(self):
        payload = rating("alice", "img-1").to_payload()
        del payload["naturalness"]
        with pytest.raises(InvalidRatingError):
            Rating.from_payload(payload)


class TestSession:
    def items(self, n=6):
        return [make_item(f"img-{i:02d}") for i in range(n)]

    def test_duplicate_item_ids_rejected(self):
        with pytest.raises(ValueError):
            AnnotationSession([make_item("same"), make_item("same")])

    def test_order_is_stable_permutation(self):
        session = AnnotationSession(self.items(8))
        order = [i.image_id for i in session.order_for("alice")]
        assert order == [i.image_id for i in session.order_for("alice")]
        assert sorted(order) == [f"img-{i:02d}" for i in range(8)]

    def test_orders_differ_between_annotators(self):
        session = AnnotationSession(self.items(8))
        orders = {
            tuple(i.image_id for i in session.order_for(name))
            for name in ("alice", "bob", "carol", "dave")
        }
        assert len(orders) > 1

    def test_next_item_walks_order_until_done(self):
        session = AnnotationSession(self.items(4))
        seen = []
        for _ in range(4):
            item = session.next_item("alice")
            seen.append(item.image_id)
            session.submit(rating("alice", item.image_id))
        assert seen == [i.image_id for i in session.order_for("alice")]
        assert session.next_item("alice") is None
        assert session.rated_count("alice") == 4

    def test_next_item_requires_annotator(self):
        session = AnnotationSession(self.items(2))
        with pytest.raises(InvalidRatingError):
            session.next_item("")

    def test_submit_unknown_item(self):
        session = AnnotationSession(self.items(2))
        with pytest.raises(UnknownItemError):
            session.submit(rating("alice", "missing"))

    def test_submit_fills_timestamp(self):
        session = AnnotationSession(self.items(2))
        stored = session.submit(rating("alice", "img-00", timestamp=""))
        assert stored.timestamp  # UTC ISO stamp added on the way in
        assert "T" in stored.timestamp

    def test_resubmit_overwrites(self):
        session = AnnotationSession(self.items(3))
        session.submit(rating("alice", "img-00", naturalness=2))
        session.submit(rating("alice", "img-00", naturalness=5))
        rows = session.ratings()
        assert len(rows) == 1
        assert rows[0].naturalness == 5
        assert session.rated_count("alice") == 1

    def test_annotators_do_not_interfere(self):
        session = AnnotationSession(self.items(3))
        session.submit(rating("alice", "img-00"))
        assert session.rated_count("bob") == 0
        assert session.next_item("bob") is not None

    def test_log_replay_restores_state(self, tmp_path):
        path = tmp_path / "ratings.jsonl"
        first = AnnotationSession(self.items(4), ratings_path=path)
        first.submit(rating("alice", "img-00", naturalness=2))
        first.submit(rating("alice", "img-00", naturalness=4))  # overwrite
        first.submit(rating("bob", "img-01", correct=False))
        assert len(path.read_text().splitlines()) == 3  # append-only log

        resumed = AnnotationSession(self.items(4), ratings_path=path)
        assert resumed.rated_count("alice") == 1
        assert resumed.rated_count("bob") == 1
        by_key = {(r.annotator_id, r.image_id): r for r in resumed.ratings()}
        assert by_key[("alice", "img-00")].naturalness == 4
        assert by_key[("bob", "img-01")].feasibility_correct is False

    def test_image_bytes_requires_registered_path(self, tmp_path):
        image = tmp_path / "img.png"
        image.write_bytes(b"png-bytes")
        session = AnnotationSession(self.items(2), image_paths={"img-00": image})
        assert session.image_bytes("img-00") == b"png-bytes"
        with pytest.raises(UnknownItemError):
            session.image_bytes("img-01")  # known item, no file registered
        with pytest.raises(UnknownItemError):
            session.image_bytes("missing")


class TestExport:
    def test_round_trip(self):
        items = [make_item("img-00"), make_item("img-01")]
        ratings = [
            rating("alice", "img-00", correct=True, naturalness=5),
            rating("bob", "img-01", correct=False, naturalness=1),
        ]
        text = export_text(ratings, items)
        lines = text.splitlines()
        assert lines[0].split("\t")[0] == "annotator_id"
        assert len(lines) == 3
        assert parse_export(text) == sorted(
            ratings, key=lambda r: (r.annotator_id, r.image_id)
        )

    def test_rows_sorted_by_annotator_then_item(self):
        items = [make_item("img-00"), make_item("img-01")]
        ratings = [
            rating("zoe", "img-00"),
            rating("al", "img-01"),
            rating("al", "img-00"),
        ]
        text = export_text(ratings, items)
        firsts = [line.split("\t")[:2] for line in text.splitlines()[1:]]
        assert firsts == [["al", "img-00"], ["al", "img-01"], ["zoe", "img-00"]]

    def test_unknown_item_exports_blank_cell(self):
        text = export_text([rating("alice", "gone")], [])
        row = text.splitlines()[1].split("\t")
        assert row[2] == "" and row[3] == ""
        assert parse_export(text)[0].image_id == "gone"

    def test_parse_rejects_bad_header_and_width(self):
        from monoedit.annotation import AnnotationError

        with pytest.raises(AnnotationError):
            parse_export("nope\n")
        good = export_text([rating("a", "b")], [make_item("b")])
        broken = good + "only\tthree\tcols\n"
        with pytest.raises(AnnotationError):
            parse_export(broken)


class TestAggregates:
    def test_hand_computed_cell(self):
        items = [make_item(f"i{i}") for i in range(3)]
        ratings = [
            rating("a", "i0", correct=True, naturalness=4),
            rating("a", "i1", correct=True, naturalness=5),
            rating("a", "i2", correct=False, naturalness=3),
        ]
        cells = aggregate_ratings(ratings, items)
        cell = cells[0]
        assert cell.category == "color" and cell.feasibility == "feasible"
        assert cell.correctness_pct == pytest.approx(66.7)
        assert cell.mean_naturalness == pytest.approx(4.0)
        assert cell.n == 3
        averaged = cells[-1]
        assert averaged.category == "averaged"
        assert averaged.correctness_pct == pytest.approx(66.7)

    def test_all_correct_extreme(self):
        items = [make_item("i0")]
        cells = aggregate_ratings([rating("a", "i0", naturalness=5)], items)
        assert cells[0].correctness_pct == 100.0
        assert cells[0].mean_naturalness == 5.0

    def test_averaged_row_uses_unrounded_means(self):
        # 1/7 correct -> 14.2857%; 2/7 -> 28.5714%.  The cross-category mean
        # of the unrounded values is 21.42855 -> 21.4; averaging the rounded
        # cells would give (14.3 + 28.6) / 2 = 21.45 -> 21.5.
        items = [
            make_item(f"bg{i}", category=AttributeCategory.BACKGROUND) for i in range(7)
        ] + [make_item(f"co{i}", category=AttributeCategory.COLOR) for i in range(7)]
        ratings = [
            rating("a", f"bg{i}", correct=(i == 0), naturalness=3) for i in range(7)
        ] + [rating("a", f"co{i}", correct=(i < 2), naturalness=3) for i in range(7)]
        cells = {(c.category, c.feasibility): c for c in aggregate_ratings(ratings, items)}
        assert cells[("background", "feasible")].correctness_pct == pytest.approx(14.3)
        assert cells[("color", "feasible")].correctness_pct == pytest.approx(28.6)
        assert cells[("averaged", "feasible")].correctness_pct == pytest.approx(21.4)
        assert cells[("averaged", "feasible")].n == 14

    def test_averaged_rows_split_by_feasibility(self):
        items = [
            make_item("f0", feasibility=Feasibility.FEASIBLE),
            make_item("i0", feasibility=Feasibility.INFEASIBLE),
        ]
        ratings = [
            rating("a", "f0", correct=True, naturalness=5),
            rating("a", "i0", correct=False, naturalness=1),
        ]
        cells = aggregate_ratings(ratings, items)
        averaged = {c.feasibility: c for c in cells if c.category == "averaged"}
        assert averaged["feasible"].correctness_pct == 100.0
        assert averaged["infeasible"].correctness_pct == 0.0

    def test_empty_or_unmatched_ratings_rejected(self):
        with pytest.raises(ValueError):
            aggregate_ratings([], [make_item("x")])
        with pytest.raises(ValueError):
            aggregate_ratings([rating("a", "gone")], [make_item("x")])
        # unknown items are skipped when at least one rating matches
        items = [make_item("x")]
        cells = aggregate_ratings([rating("a", "x"), rating("a", "gone")], items)
        assert all(c.n == 1 for c in cells)

    def test_table_formatting(self):
        cells = [
            AggregateCell("color", "feasible", 92.2, 3.94, 12),
            AggregateCell("averaged", "feasible", 92.2, 3.94, 12),
        ]
        text = aggregate_table(cells)
        lines = text.splitlines()
        assert lines[0] == "category\tfeasibility\tcorrectness_pct\tmean_naturalness\tn"
        assert lines[1] == "color\tfeasible\t92.2\t3.94\t12"

    def test_share_arithmetic_matches_fractions(self):
        # spot-check the percentage against exact rational arithmetic
        items = [make_item(f"i{i}") for i in range(9)]
        ratings = [rating("a", f"i{i}", correct=(i < 7)) for i in range(9)]
        cell = aggregate_ratings(ratings, items)[0]
        exact = Fraction(700, 9)
        assert abs(cell.correctness_pct - float(exact)) <= 0.05 + 1e-9


@pytest.fixture()
def http_session(tmp_path):
    image = tmp_path / "img-00.png"
    image.write_bytes(b"\x89PNG fake body")
    items = [
        AnnotationItem(
            image_id=f"img-{i:02d}",
            prompt_text=f"text {i}",
            category=AttributeCategory.COLOR,
            claimed_feasibility=Feasibility.FEASIBLE if i % 2 == 0 else Feasibility.INFEASIBLE,
        )
        for i in range(3)
    ]
    session = AnnotationSession(
        items, ratings_path=tmp_path / "ratings.jsonl", image_paths={"img-00": image}
    )
    server = build_server(session, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield session, base
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)


def http_get(url):
    try:
        with urllib.request.urlopen(url) as response:
            return response.status, response.read(), dict(response.headers)
    except urllib.error.HTTPError as error:
        return error.code, error.read(), dict(error.headers)


def http_post(url, body: bytes):
    request = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(request) as response:
            return response.status, response.read()
    except urllib.error.HTTPError as error:
        return error.code, error.read()


class TestHttpService:
    def test_next_then_rate_then_advance(self, http_session):
        session, base = http_session
        status, body, headers = http_get(f"{base}/items/next?annotator=alice")
        assert status == 200
        assert headers["Access-Control-Allow-Origin"] == "*"
        state = json.loads(body)
        assert state["rated"] == 0 and state["total"] == 3 and state["done"] is False
        first = state["item"]["image_id"]
        assert first == session.order_for("alice")[0].image_id

        status, body = http_post(
            f"{base}/ratings",
            json.dumps(
                {
                    "annotator_id": "alice",
                    "image_id": first,
                    "feasibility_correct": True,
                    "naturalness": 4,
                }
            ).encode(),
        )
        assert status == 201
        reply = json.loads(body)
        assert reply["rated"] == 1 and reply["stored"]["image_id"] == first
        assert reply["stored"]["timestamp"]

        status, body, _ = http_get(f"{base}/items/next?annotator=alice")
        state = json.loads(body)
        assert state["rated"] == 1
        assert state["item"]["image_id"] != first

    def test_done_after_all_rated(self, http_session):
        session, base = http_session
        for item in session.order_for("alice"):
            http_post(
                f"{base}/ratings",
                json.dumps(
                    {
                        "annotator_id": "alice",
                        "image_id": item.image_id,
                        "feasibility_correct": False,
                        "naturalness": 2,
                    }
                ).encode(),
            )
        status, body, _ = http_get(f"{base}/items/next?annotator=alice")
        state = json.loads(body)
        assert status == 200 and state["done"] is True and "item" not in state
        assert state["rated"] == 3

    def test_missing_annotator_is_400(self, http_session):
        _, base = http_session
        assert http_get(f"{base}/items/next")[0] == 400

    def test_out_of_scale_naturalness_is_422(self, http_session):
        session, base = http_session
        status, body = http_post(
            f"{base}/ratings",
            json.dumps(
                {
                    "annotator_id": "alice",
                    "image_id": "img-00",
                    "feasibility_correct": True,
                    "naturalness": 6,
                }
            ).encode(),
        )
        assert status == 422
        assert "naturalness" in json.loads(body)["error"]
        assert session.rated_count("alice") == 0

    def test_unknown_item_is_404_and_bad_json_is_400(self, http_session):
        _, base = http_session
        status, _ = http_post(
            f"{base}/ratings",
            json.dumps(
                {
                    "annotator_id": "a",
                    "image_id": "missing",
                    "feasibility_correct": True,
                    "naturalness": 3,
                }
            ).encode(),
        )
        assert status == 404
        assert http_post(f"{base}/ratings", b"{not json")[0] == 400
        assert http_post(f"{base}/ratings", b'"just a string"')[0] == 400

    def test_double_post_yields_single_export_row(self, http_session):
        session, base = http_session
        for naturalness in (2, 5):
            status, _ = http_post(
                f"{base}/ratings",
                json.dumps(
                    {
                        "annotator_id": "alice",
                        "image_id": "img-00",
                        "feasibility_correct": True,
                        "naturalness": naturalness,
                    }
                ).encode(),
            )
            assert status == 201
        status, body, headers = http_get(f"{base}/export")
        assert status == 200
        assert headers["Content-Type"].startswith("text/tab-separated-values")
        rows = parse_export(body.decode())
        assert len(rows) == 1
        assert rows[0].naturalness == 5  # the later submission wins

    def test_image_route(self, http_session):
        _, base = http_session
        status, body, headers = http_get(f"{base}/images/img-00")
        assert status == 200
        assert body == b"\x89PNG fake body"
        assert headers["Content-Type"] == "image/png"
        assert http_get(f"{base}/images/img-01")[0] == 404  # no file registered
        assert http_get(f"{base}/images/ghost")[0] == 404

    def test_health_and_unknown_route(self, http_session):
        _, base = http_session
        status, body, _ = http_get(f"{base}/health")
        assert status == 200 and json.loads(body)["items"] == 3
        assert http_get(f"{base}/nope")[0] == 404

    def test_options_preflight(self, http_session):
        _, base = http_session
        request = urllib.request.Request(f"{base}/ratings", method="OPTIONS")
        with urllib.request.urlopen(request) as response:
            assert response.status == 204
            assert response.headers["Access-Control-Allow-Origin"] == "*"
            assert "POST" in response.headers["Access-Control-Allow-Methods"]
