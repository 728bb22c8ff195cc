use autocontext::phantom::{generate_phantom, PhantomSpec};
use autocontext::seeding;
use autocontext_py::landmark_rows;

#[test]
fn phantom_landmarks_convert_to_rows() {
    let (_, lm, _) = generate_phantom(&PhantomSpec::default(), &mut seeding::indexed(1, "phantom", 0)).unwrap();
    let rows = landmark_rows(&lm);
    assert_eq!(rows.len(), lm.len());
    for (row, l) in rows.iter().zip(lm.iter()) {
        assert_eq!(row.0, l.name);
        assert_eq!(row.1, l.position);
        assert_eq!(row.3, l.status.as_str());
    }
}
