from django.test import SimpleTestCase

from core.validators import SchemaValidator, TitleValidator, ValidationManager

from .support import make_template, template_payload


class ValidationManagerTests(SimpleTestCase):

    def setUp(self):
        self.validation = ValidationManager()

    def test_valid_template(self):
        result = self.validation.validate_payload(make_template().to_dict(), 'template')
        self.assertTrue(result['is_valid'])
        self.assertEqual(result['errors'], [])

    def test_template_id_pattern(self):
        payload = make_template().to_dict()
        payload['template_id'] = 'T-58'
        result = self.validation.validate_payload(payload, 'template')
        self.assertFalse(result['is_valid'])
        self.assertEqual(ValidationManager.first_field(result), 'template_id')

    def test_empty_reason_flow_rejected(self):
        payload = template_payload('Ordinal City Ranking')
        payload['reason_flow'] = []
        result = self.validation.validate_payload(payload, 'sub_template')
        self.assertFalse(result['is_valid'])
        self.assertEqual(result['fields'], ['reason_flow'])

    def test_nested_missing_field(self):
        payload = template_payload('Ordinal City Ranking')
        del payload['example']['final_answer']
        result = self.validation.validate_payload(payload, 'sub_template')
        self.assertEqual(ValidationManager.first_field(result), 'example.final_answer')

    def test_document_title_separator(self):
        result = self.validation.validate_document({'doc_id': 'd1', 'title': 'A | B', 'body': 'text'})
        self.assertFalse(result['is_valid'])
        self.assertIn('title', result['fields'])

    def test_duplicate_store_ids(self):
        result = self.validation.validate_store_ids(['TID_1', 'TID_2', 'TID_1'])
        self.assertFalse(result['is_valid'])
        self.assertEqual(result['fields'], ['templates[2].template_id'])

    def test_run_config_rejects_unknown_keys(self):
        result = self.validation.validate_payload({'manifest': 'a.json', 'temperature': 1}, 'run_config')
        self.assertFalse(result['is_valid'])

    def test_run_config_accepts_auto_tau(self):
        result = self.validation.validate_payload({'tau': 'auto', 'tau_grid': [0.3, 0.5]}, 'run_config')
        self.assertTrue(result['is_valid'])


class SchemaValidatorTests(SimpleTestCase):

    def test_root_error_field(self):
        is_valid, problems = SchemaValidator.validate([], 'manifest')
        self.assertFalse(is_valid)
        self.assertEqual(problems[0][0], '<root>')

    def test_title_validator(self):
        self.assertEqual(TitleValidator.validate_title('Crucifixion (Titian)'), (True, 'OK'))
