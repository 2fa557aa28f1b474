fn main() {
    println!("svar");
}
