//! Confusion matrix, per-class and averaged metrics, result-row CSV.

use dcsnet::metrics::{confusion_named, metrics, write_result_rows, Averaging, ResultRow};

fn main() -> dcsnet::Result<()> {
    let truth = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
    let predicted = [0, 0, 1, 1, 1, 2, 2, 2, 0, 2];
    let names = vec!["aca".to_string(), "bn".to_string(), "scc".to_string()];
    let cm = confusion_named(&truth, &predicted, names)?;
    print!("{}", cm.to_csv());
    for averaging in [Averaging::Macro, Averaging::Weighted] {
        let r = metrics(&cm, averaging)?;
        println!("{averaging:?}: accuracy {:.3} precision {:.3} recall {:.3} F1 {:.3}", r.accuracy, r.precision, r.recall, r.f1);
    }
    let r = metrics(&cm, Averaging::Macro)?;
    for c in &r.per_class {
        println!("{}: tp {} fp {} fn {} tn {}", c.name, c.tp, c.fp, c.fn_, c.tn);
    }
    print!("{}", write_result_rows(&[ResultRow::new("DCSNet|residual", 668_931, 0.3, 10.0, &r)])?);
    Ok(())
}
