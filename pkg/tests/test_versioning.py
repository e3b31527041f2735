import pytest

from dsfn_irl.versioning import Tag
from tests.src.util import scratch_dir


@pytest.fixture
def scratch():
    yield from scratch_dir('scratch/test_versioning')


def test_create_tag_from_string():
    tag = Tag('dsfn:1')
    assert tag.name == 'dsfn'
    assert tag.version == 1


def test_create_tag_from_string_without_version():
    tag = Tag('tril')
    assert tag.name == 'tril'
    assert tag.version is None


def test_create_tag_from_string_double_colon():
    with pytest.raises(ValueError):
        Tag('tag:2:1')


def test_dashes_become_underscores():
    assert Tag('transition-head').name == 'transition_head'


def test_get_version_from_filename():
    assert Tag.get_version_from_filename('snapshot-qnet-2.bin') == 2


def test_get_tag_from_filename():
    tag = Tag.from_filename('snapshot-action_head-2.bin')
    assert tag.name == 'action_head'
    assert tag.version == 2


def test_get_tag_from_filename_without_version():
    tag = Tag.from_filename('tril-trunk.bin')
    assert tag.name == 'trunk'
    assert tag.version is None


def test_tag_from_untagged_filename():
    with pytest.raises(ValueError):
        Tag.from_filename('snapshot.bin')


def test_append_to_filename():
    assert Tag('online', 2).append_to_filename('dsfn.bin') \
        == 'dsfn-online-2.bin'
    assert Tag('online').append_to_filename('dsfn.bin') == 'dsfn-online.bin'


def test_latest_version(scratch):
    assert Tag.latest_version(scratch, 'dsfn') is None
    for version in (1, 3, 2):
        with open(Tag('dsfn', version).append_to_filename(
                f'{scratch}/net.bin'), 'w'):
            pass
    assert Tag.latest_version(scratch, 'dsfn') == 3
    assert Tag.latest_version(f'{scratch}/missing', 'dsfn') is None


def test_equality():
    assert Tag('qnet:1') == Tag('qnet', 1)
    assert Tag('qnet') != Tag('qnet', 1)
    assert len({Tag('qnet:1'), Tag('qnet', 1)}) == 1
